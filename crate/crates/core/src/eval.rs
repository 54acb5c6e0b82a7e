//! Test-set evaluation, report tables and error-colored exports.

use std::fmt::Write as _;
use std::path::Path;

use bpcgen_tape::Real;
use serde::{Deserialize, Serialize};

use crate::encoder::{Modality, SliceImage};
use crate::error::{Error, Result};
use crate::metrics::{
    chamfer_distance, emd, pc_to_pc_errors, region_error_report, EmdResult, RegionError, DEFAULT_EXACT_LIMIT,
};
use crate::pointcloud::{write_ply, PointCloud, RegionBox};
use crate::synth::{DatasetManifest, Split, SubjectEntry};
use crate::training::Model;

/// Scale tag of the PC-to-PC columns: values are shown multiplied by 10⁴.
pub const PC2PC_SCALE_TAG: &str = "×10⁻⁴";
/// Scale tag of the per-point EMD column: values are shown multiplied by 10.
pub const EMD_SCALE_TAG: &str = "×10⁻¹";

const PC2PC_SCALE: f64 = 1e4;
const EMD_SCALE: f64 = 1e1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Largest cloud solved with the exact assignment.
    pub emd_exact_limit: usize,
    /// Auction tolerance above the exact limit.
    pub emd_epsilon: f64,
    pub modality: Modality,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            emd_exact_limit: DEFAULT_EXACT_LIMIT,
            emd_epsilon: 1e-4,
            modality: Modality::Axial,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub id: String,
    pub cd: f64,
    pub emd: EmdResult,
    /// EMD divided by the point count.
    pub emd_per_point: f64,
    /// Mean per-vertex PC-to-PC error of the reconstruction.
    pub pc2pc_total_mean: f64,
    pub regions: Vec<RegionError>,
}

/// One row of the region table, pooled over every test vertex in the box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub name: String,
    pub count: usize,
    /// `None` marks an empty region.
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionTable {
    pub regions: Vec<RegionRow>,
    pub total: f64,
    pub scale_tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Mean over subjects of the per-subject Chamfer distance.
    pub mean_cd: f64,
    pub median_cd: f64,
    pub mean_emd: f64,
    pub mean_emd_per_point: f64,
    pub emd_scale_tag: String,
    pub pc2pc_scale_tag: String,
}

/// Headline numbers of another model scored on the same test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mean_cd: f64,
    pub mean_emd_per_point: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub per_subject: Vec<SubjectScore>,
    pub region_table: RegionTable,
    pub aggregates: Aggregates,
    #[serde(default)]
    pub comparisons: Vec<ComparisonRow>,
}

/// A report together with the reconstructions it scored, in test order.
pub struct Evaluation {
    pub report: EvalReport,
    pub outputs: Vec<(String, PointCloud)>,
}

fn score(id: &str, generated: &PointCloud, target: &PointCloud, boxes: &[RegionBox], options: &EvalOptions) -> Result<SubjectScore> {
    if generated.len() != target.len() {
        return Err(Error::InvalidInput(format!(
            "subject {id}: reconstruction has {} points, target has {}",
            generated.len(),
            target.len()
        )));
    }
    let emd = emd(target, generated, options.emd_exact_limit, options.emd_epsilon)?;
    let regions = region_error_report(generated, target, boxes);
    Ok(SubjectScore {
        id: id.to_string(),
        cd: chamfer_distance(target, generated),
        emd_per_point: emd.per_point(target.len()),
        emd,
        pc2pc_total_mean: regions.total_mean,
        regions: regions.regions,
    })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl EvalReport {
    /// Assembles the region table and aggregates from per-subject rows.
    pub fn from_scores(label: impl Into<String>, per_subject: Vec<SubjectScore>) -> Result<Self> {
        if per_subject.is_empty() {
            return Err(Error::InvalidInput("no subjects to report".into()));
        }
        let n = per_subject.len() as f64;
        let names: Vec<String> = per_subject[0].regions.iter().map(|r| r.name.clone()).collect();
        let regions = names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let (mut count, mut sum) = (0, 0.0);
                for s in &per_subject {
                    let r = &s.regions[k];
                    count += r.count;
                    sum += r.mean.map_or(0.0, |m| m * r.count as f64);
                }
                RegionRow {
                    name: name.clone(),
                    count,
                    mean: (count > 0).then(|| sum / count as f64),
                }
            })
            .collect();
        let cds: Vec<f64> = per_subject.iter().map(|s| s.cd).collect();
        let aggregates = Aggregates {
            mean_cd: cds.iter().sum::<f64>() / n,
            median_cd: median(&cds),
            mean_emd: per_subject.iter().map(|s| s.emd.value).sum::<f64>() / n,
            mean_emd_per_point: per_subject.iter().map(|s| s.emd_per_point).sum::<f64>() / n,
            emd_scale_tag: EMD_SCALE_TAG.into(),
            pc2pc_scale_tag: PC2PC_SCALE_TAG.into(),
        };
        Ok(Self {
            label: label.into(),
            region_table: RegionTable {
                regions,
                // Every subject has the same point count, so this is the
                // pooled per-vertex mean.
                total: per_subject.iter().map(|s| s.pc2pc_total_mean).sum::<f64>() / n,
                scale_tag: PC2PC_SCALE_TAG.into(),
            },
            per_subject,
            aggregates,
            comparisons: Vec::new(),
        })
    }

    /// Adds another model's headline numbers to the CD/EMD table.
    pub fn add_comparison(&mut self, other: &EvalReport) {
        self.comparisons.push(ComparisonRow {
            label: other.label.clone(),
            mean_cd: other.aggregates.mean_cd,
            mean_emd_per_point: other.aggregates.mean_emd_per_point,
        });
    }

    /// Region table: one row per area plus the total, PC-to-PC error
    /// scaled by 10⁴.
    pub fn region_text(&self) -> String {
        let rows: Vec<(String, String)> = self
            .region_table
            .regions
            .iter()
            .map(|r| (r.name.clone(), r.mean.map_or_else(|| "empty".to_string(), |m| sig4(m * PC2PC_SCALE))))
            .chain(std::iter::once(("Total".to_string(), sig4(self.region_table.total * PC2PC_SCALE))))
            .collect();
        let header = ("Area".to_string(), format!("{} ({PC2PC_SCALE_TAG})", self.label));
        render(&[header.0, header.1], &rows.into_iter().map(|(a, b)| vec![a, b]).collect::<Vec<_>>())
    }

    /// Model/CD/EMD table with this model first and any comparisons after.
    pub fn summary_text(&self) -> String {
        let mut rows = vec![vec![
            self.label.clone(),
            sig4(self.aggregates.mean_cd),
            sig4(self.aggregates.mean_emd_per_point * EMD_SCALE),
        ]];
        for c in &self.comparisons {
            rows.push(vec![c.label.clone(), sig4(c.mean_cd), sig4(c.mean_emd_per_point * EMD_SCALE)]);
        }
        render(
            &["Model".into(), "CD (mean per subject)".into(), format!("EMD per point ({EMD_SCALE_TAG})")],
            &rows,
        )
    }

    pub fn text(&self) -> String {
        format!("{}\n{}", self.region_text(), self.summary_text())
    }
}

/// Formats `v` with four significant digits.
pub fn sig4(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.3}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    if !(-4..6).contains(&magnitude) {
        return format!("{v:.3e}");
    }
    let decimals = (3 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain(std::iter::once(header[c].chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            let pad = widths[c] - cell.chars().count();
            if c == 0 {
                let _ = write!(s, "{cell}{}", " ".repeat(pad));
            } else {
                let _ = write!(s, "  {}{cell}", " ".repeat(pad));
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&line(&rule));
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

/// Scores `reconstruct` on every test subject of `manifest`.
pub fn evaluate_with(
    manifest: &DatasetManifest,
    boxes: &[RegionBox],
    options: &EvalOptions,
    label: &str,
    mut reconstruct: impl FnMut(&SubjectEntry, &SliceImage) -> Result<PointCloud>,
) -> Result<Evaluation> {
    let test = manifest.split(Split::Test);
    if test.is_empty() {
        return Err(Error::InvalidInput("the manifest has no test subjects".into()));
    }
    let mut scores = Vec::with_capacity(test.len());
    let mut outputs = Vec::with_capacity(test.len());
    for subject in test {
        let slice = manifest.slice(subject, options.modality)?;
        let target = manifest.cloud(subject)?;
        let generated = reconstruct(subject, &slice)?;
        scores.push(score(&subject.id, &generated, &target, boxes, options)?);
        outputs.push((subject.id.clone(), generated));
    }
    Ok(Evaluation {
        report: EvalReport::from_scores(label, scores)?,
        outputs,
    })
}

/// Scores a trained model with deterministic `z = μ` reconstructions.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    manifest: &DatasetManifest,
    boxes: &[RegionBox],
    options: &EvalOptions,
    label: &str,
) -> Result<Evaluation> {
    if model.points() != manifest.point_count {
        return Err(Error::InvalidInput(format!(
            "model generates {} points, dataset clouds have {}",
            model.points(),
            manifest.point_count
        )));
    }
    evaluate_with(manifest, boxes, options, label, |_, slice| model.reconstruct(slice))
}

/// Linear blue-to-red ramp; `t` is clamped to `[0, 1]`.
pub fn ramp_color(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

/// The 99th percentile: element `⌈0.99·n⌉ − 1` of the sorted values.
pub fn percentile99(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((0.99 * v.len() as f64).ceil() as usize).max(1) - 1;
    v[idx]
}

/// Colors for per-vertex errors, ramped over `[0, p99]`.
pub fn error_colors(errors: &[f64]) -> Vec<[u8; 3]> {
    let top = percentile99(errors);
    errors
        .iter()
        .map(|&e| ramp_color(if top > 0.0 { e / top } else { 0.0 }))
        .collect()
}

/// `pc` annotated with its PC-to-PC errors against `target` and the
/// matching colors.
pub fn colored(pc: &PointCloud, target: &PointCloud) -> Result<PointCloud> {
    let errors = pc_to_pc_errors(pc, target);
    let colors = error_colors(&errors);
    pc.clone().with_errors(errors)?.with_colors(colors)
}

pub fn export_colored(pc: &PointCloud, target: &PointCloud, out_path: impl AsRef<Path>) -> Result<()> {
    write_ply(&colored(pc, target)?, out_path)
}
