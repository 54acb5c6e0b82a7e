//! Synthetic brain phantoms paired with slices and ground-truth clouds.
//!
//! A phantom is the union of two ellipsoidal hemispheres whose surfaces are
//! pushed in and out by a smooth radial bump field, with a thin midline gap
//! between them. Slices are taken from a blurred copy of the occupancy grid;
//! clouds are farthest-point samples of the surface voxels.

mod pgm;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{Modality, SliceImage};
use crate::error::{io_err, Error, Result};
use crate::pointcloud::{farthest_point_indices, normalize_unit, read_ply, write_ply, PointCloud};

pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm, Pgm};

/// Grid extent along x, y, z.
pub const GRID_DIMS: [usize; 3] = [91, 109, 91];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Centre of each hemisphere in voxel coordinates.
    pub centers: [[f64; 3]; 2],
    pub semi_axes: [[f64; 3]; 2],
    /// Width of the cleared band around `x = 45`, in voxels.
    pub midline_gap: f64,
    pub bump_count: usize,
    /// Largest relative change of the radius.
    pub bump_amplitude: f64,
    /// Concentration of each bump around its direction.
    pub bump_sharpness: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let mid = (GRID_DIMS[0] - 1) as f64 / 2.0;
        Self {
            seed: 0,
            centers: [[mid - 20.0, 54.0, 45.0], [mid + 20.0, 54.0, 45.0]],
            semi_axes: [[22.0, 44.0, 36.0]; 2],
            midline_gap: 2.0,
            bump_count: 6,
            bump_amplitude: 0.08,
            bump_sharpness: 8.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("invalid phantom spec: {m}")));
        if !(0.0..1.0).contains(&self.bump_amplitude) || self.bump_sharpness < 0.0 || self.midline_gap < 0.0 {
            return bad("amplitude must lie in [0, 1); sharpness and gap must be non-negative".into());
        }
        for (c, a) in self.centers.iter().zip(&self.semi_axes) {
            for k in 0..3 {
                if !(a[k] > 0.0) {
                    return bad(format!("semi-axis {} is not positive", a[k]));
                }
                let reach = a[k] * (1.0 + self.bump_amplitude);
                if c[k] - reach < 0.0 || c[k] + reach > (GRID_DIMS[k] - 1) as f64 {
                    return bad(format!("ellipsoid at {c:?} with semi-axes {a:?} leaves the grid"));
                }
            }
        }
        Ok(())
    }

    /// A copy with semi-axes scaled per axis by factors in `[0.88, 1.0]`
    /// and a fresh bump seed, both drawn from `rng`.
    pub fn jittered(&self, rng: &mut impl Rng) -> Self {
        let mut out = self.clone();
        for a in out.semi_axes.iter_mut() {
            for v in a.iter_mut() {
                *v *= rng.gen_range(0.88..=1.0);
            }
        }
        out.seed = rng.gen();
        out
    }
}

/// Binary occupancy over a 3D grid, x-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    occupied: Vec<bool>,
}

impl VoxelGrid {
    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            occupied: vec![false; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut g = Self::empty(dims);
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let i = g.index(x, y, z);
                    g.occupied[i] = f(x, y, z);
                }
            }
        }
        g
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.occupied[self.index(x, y, z)]
    }

    /// Occupancy with out-of-range coordinates treated as empty.
    fn get_signed(&self, x: isize, y: isize, z: isize) -> bool {
        let d = self.dims;
        (0..d[0] as isize).contains(&x)
            && (0..d[1] as isize).contains(&y)
            && (0..d[2] as isize).contains(&z)
            && self.get(x as usize, y as usize, z as usize)
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn occupancy_fraction(&self) -> f64 {
        self.occupied_count() as f64 / self.occupied.len() as f64
    }

    /// Occupied voxels with at least one empty 6-neighbour, in index order.
    pub fn surface_voxels(&self) -> Vec<[usize; 3]> {
        const STEPS: [[isize; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
        let mut out = Vec::new();
        for x in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                for z in 0..self.dims[2] {
                    if !self.get(x, y, z) {
                        continue;
                    }
                    let (sx, sy, sz) = (x as isize, y as isize, z as isize);
                    if STEPS.iter().any(|s| !self.get_signed(sx + s[0], sy + s[1], sz + s[2])) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

struct Bumps {
    dirs: Vec<[f64; 3]>,
    signs: Vec<f64>,
    amplitude: f64,
    sharpness: f64,
}

impl Bumps {
    fn draw(rng: &mut ChaCha8Rng, count: usize, amplitude: f64, sharpness: f64) -> Self {
        let mut dirs = Vec::with_capacity(count);
        while dirs.len() < count {
            let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-9 {
                dirs.push([v[0] / n, v[1] / n, v[2] / n]);
            }
        }
        let signs = (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self {
            dirs,
            signs,
            amplitude,
            sharpness,
        }
    }

    /// Boundary radius, relative to the ellipsoid, along unit direction `u`.
    fn radius(&self, u: &[f64; 3]) -> f64 {
        let field: f64 = self
            .dirs
            .iter()
            .zip(&self.signs)
            .map(|(d, s)| s * (self.sharpness * (d[0] * u[0] + d[1] * u[1] + d[2] * u[2] - 1.0)).exp())
            .sum();
        1.0 + self.amplitude * field.tanh()
    }
}

pub fn make_phantom_volume(spec: &PhantomSpec) -> Result<VoxelGrid> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bumps: Vec<Bumps> = (0..2)
        .map(|_| Bumps::draw(&mut rng, spec.bump_count, spec.bump_amplitude, spec.bump_sharpness))
        .collect();
    let mid = (GRID_DIMS[0] - 1) as f64 / 2.0;
    let reach = 1.0 + spec.bump_amplitude;
    let inside = |x: usize, y: usize, z: usize| -> bool {
        if (x as f64 - mid).abs() <= spec.midline_gap / 2.0 {
            return false;
        }
        let p = [x as f64, y as f64, z as f64];
        spec.centers.iter().zip(&spec.semi_axes).zip(&bumps).any(|((c, a), b)| {
            let q = [(p[0] - c[0]) / a[0], (p[1] - c[1]) / a[1], (p[2] - c[2]) / a[2]];
            let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
            if r > reach {
                return false;
            }
            if r == 0.0 {
                return true;
            }
            r <= b.radius(&[q[0] / r, q[1] / r, q[2] / r])
        })
    };
    Ok(VoxelGrid::from_fn(GRID_DIMS, inside))
}

/// Farthest-point samples `point_count` surface voxel centres and
/// normalizes the result.
pub fn volume_to_cloud(grid: &VoxelGrid, point_count: usize, seed_index: usize) -> Result<PointCloud> {
    let surface: Vec<[f64; 3]> = grid
        .surface_voxels()
        .into_iter()
        .map(|v| [v[0] as f64, v[1] as f64, v[2] as f64])
        .collect();
    if surface.len() < point_count {
        return Err(Error::InvalidInput(format!(
            "grid has {} surface voxels but {point_count} points were requested",
            surface.len()
        )));
    }
    let idx = farthest_point_indices(&surface, point_count, seed_index)?;
    normalize_unit(&PointCloud::new(idx.iter().map(|&i| surface[i]).collect())?)
}

/// Smoothed intensity field: a zero-padded 3×3×3 box mean applied twice.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityVolume {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl IntensityVolume {
    pub fn from_grid(grid: &VoxelGrid) -> Self {
        let dims = grid.dims;
        let mut values: Vec<f64> = grid.occupied.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        let strides = [dims[1] * dims[2], dims[2], 1];
        for _ in 0..2 {
            // Separable: three 1D box sums, then one division by 27.
            for axis in 0..3 {
                let mut next = vec![0.0; values.len()];
                for (i, out) in next.iter_mut().enumerate() {
                    let coord = (i / strides[axis]) % dims[axis];
                    let mut s = values[i];
                    if coord > 0 {
                        s += values[i - strides[axis]];
                    }
                    if coord + 1 < dims[axis] {
                        s += values[i + strides[axis]];
                    }
                    *out = s;
                }
                values = next;
            }
            values.iter_mut().for_each(|v| *v /= 27.0);
        }
        Self { dims, values }
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[(x * self.dims[1] + y) * self.dims[2] + z]
    }

    /// Extent of the slice plane at `index`: `(rows, cols, depth)` where
    /// depth is the number of valid indices.
    pub fn plane_shape(dims: [usize; 3], plane: Modality) -> (usize, usize, usize) {
        match plane {
            Modality::Axial => (dims[0], dims[1], dims[2]),
            Modality::Coronal => (dims[0], dims[2], dims[1]),
            Modality::Sagittal => (dims[1], dims[2], dims[0]),
        }
    }

    /// Axial fixes z (rows x, cols y), coronal fixes y (rows x, cols z),
    /// sagittal fixes x (rows y, cols z). Each slice is min-max normalized;
    /// a constant slice maps to zero.
    pub fn slice(&self, plane: Modality, index: usize) -> Result<SliceImage> {
        let (rows, cols, depth) = Self::plane_shape(self.dims, plane);
        if index >= depth {
            return Err(Error::InvalidInput(format!(
                "{} slice index {index} outside 0..{depth}",
                plane.as_str()
            )));
        }
        let mut px = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                px.push(match plane {
                    Modality::Axial => self.at(r, c, index),
                    Modality::Coronal => self.at(r, index, c),
                    Modality::Sagittal => self.at(index, r, c),
                });
            }
        }
        let lo = px.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            px.iter_mut().for_each(|v| *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0));
        } else {
            px.iter_mut().for_each(|v| *v = 0.0);
        }
        SliceImage::new(rows, cols, px, plane)
    }

    pub fn central_slice(&self, plane: Modality) -> Result<SliceImage> {
        let (_, _, depth) = Self::plane_shape(self.dims, plane);
        self.slice(plane, depth / 2)
    }
}

pub fn extract_slice(grid: &VoxelGrid, plane: Modality, index: usize) -> Result<SliceImage> {
    IntensityVolume::from_grid(grid).slice(plane, index)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    /// Paths relative to the manifest directory.
    pub slice_paths: BTreeMap<Modality, String>,
    pub cloud_path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<SubjectEntry>,
    pub point_count: usize,
    pub normalization: String,
    /// Directory that relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NORMALIZATION_TAG: &str = "centroid_max_abs_unit";

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.subjects {
            if !seen.insert(&s.id) {
                return Err(Error::InvalidInput(format!("duplicate subject id {}", s.id)));
            }
            for p in s.slice_paths.values().chain(std::iter::once(&s.cloud_path)) {
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(Error::InvalidInput(format!("manifest references missing file {}", full.display())));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&SubjectEntry> {
        self.subjects.iter().filter(|s| s.split == split).collect()
    }

    pub fn cloud(&self, subject: &SubjectEntry) -> Result<PointCloud> {
        let pc = read_ply(self.root.join(&subject.cloud_path))?;
        if pc.len() != self.point_count {
            return Err(Error::InvalidInput(format!(
                "{} has {} points, manifest says {}",
                subject.cloud_path,
                pc.len(),
                self.point_count
            )));
        }
        Ok(pc)
    }

    pub fn slice(&self, subject: &SubjectEntry, plane: Modality) -> Result<SliceImage> {
        let rel = subject
            .slice_paths
            .get(&plane)
            .ok_or_else(|| Error::InvalidInput(format!("subject {} has no {} slice", subject.id, plane.as_str())))?;
        let pgm = read_pgm(self.root.join(rel))?;
        SliceImage::new(pgm.height, pgm.width, pgm.unit_pixels(), plane)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetOptions {
    pub subjects: usize,
    /// Fraction of subjects assigned to the training split.
    pub train_fraction: f64,
    pub point_count: usize,
    pub seed: u64,
    pub template: PhantomSpec,
    pub overwrite: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            subjects: 128,
            train_fraction: 0.8,
            point_count: 2048,
            seed: 0,
            template: PhantomSpec::default(),
            overwrite: false,
        }
    }
}

/// Train count for `n` subjects: `round(n · fraction)`, kept within
/// `1..n` so both splits are non-empty.
pub fn train_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

/// Phantom, slices and cloud for subject `index` of a dataset.
pub fn make_subject(
    options: &DatasetOptions,
    index: usize,
) -> Result<(BTreeMap<Modality, SliceImage>, PointCloud)> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    rng.set_stream(index as u64 + 1);
    let spec = options.template.jittered(&mut rng);
    let grid = make_phantom_volume(&spec)?;
    let cloud = volume_to_cloud(&grid, options.point_count, 0)?;
    let volume = IntensityVolume::from_grid(&grid);
    let slices = Modality::ALL
        .into_iter()
        .map(|m| Ok((m, volume.central_slice(m)?)))
        .collect::<Result<_>>()?;
    Ok((slices, cloud))
}

pub fn build_dataset(options: &DatasetOptions, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out = out_dir.as_ref();
    if options.subjects < 2 {
        return Err(Error::InvalidInput("a dataset needs at least 2 subjects".into()));
    }
    if !(options.train_fraction > 0.0 && options.train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train fraction must lie in (0, 1), got {}",
            options.train_fraction
        )));
    }
    options.template.validate()?;
    if out.exists() {
        let non_empty = std::fs::read_dir(out).map_err(io_err(out))?.next().is_some();
        if non_empty && !options.overwrite {
            return Err(Error::InvalidInput(format!(
                "{} is not empty; pass overwrite to replace it",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;

    let mut order: Vec<usize> = (0..options.subjects).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(options.seed);
    order.shuffle(&mut split_rng);
    let n_train = train_count(options.subjects, options.train_fraction);
    let mut split = vec![Split::Test; options.subjects];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }

    let mut subjects = Vec::with_capacity(options.subjects);
    for (i, &sp) in split.iter().enumerate() {
        let id = format!("subject_{i:03}");
        let dir = out.join(&id);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let (slices, cloud) = make_subject(options, i)?;
        let mut slice_paths = BTreeMap::new();
        for (m, img) in &slices {
            let name = format!("{}.pgm", m.as_str());
            write_pgm(dir.join(&name), img.height(), img.width(), img.pixels())?;
            slice_paths.insert(*m, format!("{id}/{name}"));
        }
        write_ply(&cloud, dir.join("cloud.ply"))?;
        subjects.push(SubjectEntry {
            cloud_path: format!("{id}/cloud.ply"),
            id,
            slice_paths,
            split: sp,
        });
    }
    let manifest = DatasetManifest {
        subjects,
        point_count: options.point_count,
        normalization: NORMALIZATION_TAG.into(),
        root: out.to_path_buf(),
    };
    let path = out.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}
