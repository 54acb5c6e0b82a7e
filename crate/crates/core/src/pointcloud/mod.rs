//! Point cloud data model and the geometric utilities shared by every other
//! module: unit normalization, farthest point sampling and box regions.

mod ply;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ply::{read_ply, write_ply, write_ply_to};

pub type Point = [f64; 3];

/// An ordered set of 3D vertices with optional per-vertex annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    vertex_errors: Option<Vec<f64>>,
    vertex_colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point cloud has no points".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            vertex_errors: None,
            vertex_colors: None,
        })
    }

    /// Builds a cloud from a flat `x y z x y z …` buffer.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if !coords.len().is_multiple_of(3) {
            return Err(Error::InvalidInput(format!(
                "{} coordinates is not a multiple of 3",
                coords.len()
            )));
        }
        Self::new(coords.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn with_errors(mut self, errors: Vec<f64>) -> Result<Self> {
        if errors.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "{} vertex errors for {} points",
                errors.len(),
                self.len()
            )));
        }
        if errors.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::InvalidInput("vertex errors must be finite and non-negative".into()));
        }
        self.vertex_errors = Some(errors);
        Ok(self)
    }

    pub fn with_colors(mut self, colors: Vec<[u8; 3]>) -> Result<Self> {
        if colors.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "{} vertex colors for {} points",
                colors.len(),
                self.len()
            )));
        }
        self.vertex_colors = Some(colors);
        Ok(self)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false: clouds hold at least one point.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn vertex_errors(&self) -> Option<&[f64]> {
        self.vertex_errors.as_deref()
    }

    pub fn vertex_colors(&self) -> Option<&[[u8; 3]]> {
        self.vertex_colors.as_deref()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn centroid(&self) -> Point {
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    pub fn max_abs_coord(&self) -> f64 {
        self.points
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Applies `f` to every point, dropping annotations.
    pub fn map_points(&self, f: impl Fn(&Point) -> Point) -> Result<Self> {
        Self::new(self.points.iter().map(f).collect())
    }

    /// Rows `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidInput(format!(
                "index {bad} out of range for {} points",
                self.len()
            )));
        }
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}

/// Centers a cloud on its centroid and scales it so that the largest
/// absolute coordinate is 1. Point order is preserved.
pub fn normalize_unit(pc: &PointCloud) -> Result<PointCloud> {
    let first = pc.points[0];
    if pc.points.iter().all(|p| *p == first) {
        return Err(Error::InvalidInput(
            "cannot normalize a cloud whose points are all identical".into(),
        ));
    }
    let c = pc.centroid();
    let centered: Vec<Point> = pc
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let scale = centered
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    PointCloud::new(centered.into_iter().map(|p| p.map(|v| v / scale)).collect())
}

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Indices chosen by farthest point sampling, in selection order.
///
/// The first index is `seed_index`; each later pick maximizes the distance to
/// the nearest already-selected point, ties going to the lowest index.
pub fn farthest_point_indices(points: &[Point], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "cannot sample {k} points from a cloud of {n}"
        )));
    }
    if seed_index >= n {
        return Err(Error::InvalidInput(format!(
            "seed index {seed_index} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; n];
    let mut current = seed_index;
    selected.push(current);
    while selected.len() < k {
        let anchor = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &anchor);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best_d {
                best_d = nearest[i];
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// Farthest point sampling of `k` rows of `pc`.
pub fn farthest_point_sample(pc: &PointCloud, k: usize, seed_index: usize) -> Result<PointCloud> {
    let idx = farthest_point_indices(&pc.points, k, seed_index)?;
    pc.select(&idx)
}

/// A named, closed, axis-aligned box in normalized coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub name: String,
    #[serde(rename = "min")]
    pub min_corner: Point,
    #[serde(rename = "max")]
    pub max_corner: Point,
}

impl RegionBox {
    pub fn new(name: impl Into<String>, min_corner: Point, max_corner: Point) -> Result<Self> {
        let b = Self {
            name: name.into(),
            min_corner,
            max_corner,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::InvalidInput("region name must not be empty".into()));
        }
        if (0..3).any(|k| !(self.min_corner[k] <= self.max_corner[k])) {
            return Err(Error::InvalidInput(format!(
                "region {:?}: min corner exceeds max corner",
                self.name
            )));
        }
        Ok(())
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|k| p[k] >= self.min_corner[k] && p[k] <= self.max_corner[k])
    }
}

/// Three illustrative regions slicing the normalized cloud along its long
/// (anterior-posterior) axis.
pub fn default_regions() -> Vec<RegionBox> {
    vec![
        RegionBox {
            name: "anterior".into(),
            min_corner: [-1.0, 0.35, -1.0],
            max_corner: [1.0, 1.0, 1.0],
        },
        RegionBox {
            name: "central".into(),
            min_corner: [-1.0, -0.3, -1.0],
            max_corner: [1.0, 0.3, 1.0],
        },
        RegionBox {
            name: "posterior".into(),
            min_corner: [-1.0, -1.0, -1.0],
            max_corner: [1.0, -0.35, 1.0],
        },
    ]
}

pub fn read_regions(path: &std::path::Path) -> Result<Vec<RegionBox>> {
    let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
    let boxes: Vec<RegionBox> = serde_json::from_str(&text)?;
    if boxes.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no regions", path.display())));
    }
    for b in &boxes {
        b.validate()?;
    }
    Ok(boxes)
}

/// For each box, the indices of the vertices inside it.
pub fn assign_regions(pc: &PointCloud, boxes: &[RegionBox]) -> Vec<Vec<usize>> {
    boxes
        .iter()
        .map(|b| {
            pc.points
                .iter()
                .enumerate()
                .filter(|(_, p)| b.contains(p))
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}
