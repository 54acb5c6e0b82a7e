//! Distances between point clouds.
//!
//! Chamfer distance and PC-to-PC error use squared Euclidean distances; the
//! earth mover's distance uses plain Euclidean distances. All arithmetic is
//! in `f64`.

mod assignment;
mod emd;
mod nearest;

use serde::{Deserialize, Serialize};

use crate::pointcloud::{assign_regions, Point, PointCloud, RegionBox};

pub use assignment::{auction_assignment, optimal_assignment};
pub use emd::{emd, emd_approx, emd_exact, emd_exact_limited, EmdMethod, EmdResult, DEFAULT_EXACT_LIMIT};
pub use nearest::NearestIndex;

/// `min_{y∈Y} ‖y′ − y‖²`.
pub fn pc_to_pc_error_point(yp: &Point, y: &PointCloud) -> f64 {
    y.points()
        .iter()
        .map(|p| crate::pointcloud::dist2(yp, p))
        .fold(f64::INFINITY, f64::min)
}

/// Per-vertex PC-to-PC error of every point of `yp` against `y`.
pub fn pc_to_pc_errors(yp: &PointCloud, y: &PointCloud) -> Vec<f64> {
    let index = NearestIndex::new(y.points());
    yp.points().iter().map(|p| index.nearest(p).1).collect()
}

/// `Σ_{y′∈Y′} min_{y∈Y} ‖y′ − y‖²`.
pub fn pc_to_pc_error_total(yp: &PointCloud, y: &PointCloud) -> f64 {
    pc_to_pc_errors(yp, y).iter().sum()
}

/// Symmetric Chamfer distance: the sum of both one-directional PC-to-PC
/// totals.
pub fn chamfer_distance(y: &PointCloud, yp: &PointCloud) -> f64 {
    pc_to_pc_error_total(yp, y) + pc_to_pc_error_total(y, yp)
}

/// Chamfer distance between flat coordinate buffers together with its
/// gradient with respect to the first argument.
pub fn chamfer_with_gradient(generated: &[Point], target: &[Point]) -> (f64, Vec<f64>) {
    let to_target = NearestIndex::new(target);
    let to_generated = NearestIndex::new(generated);
    let mut grad = vec![0.0; generated.len() * 3];
    let mut value = 0.0;
    for (i, p) in generated.iter().enumerate() {
        let (j, d) = to_target.nearest(p);
        value += d;
        for k in 0..3 {
            grad[3 * i + k] += 2.0 * (p[k] - target[j][k]);
        }
    }
    for t in target {
        let (i, d) = to_generated.nearest(t);
        value += d;
        for k in 0..3 {
            grad[3 * i + k] += 2.0 * (generated[i][k] - t[k]);
        }
    }
    (value, grad)
}

/// Mean per-point error of the generated vertices inside one region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionError {
    pub name: String,
    pub count: usize,
    /// `None` when no generated vertex falls in the region.
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionErrorReport {
    pub regions: Vec<RegionError>,
    pub total_mean: f64,
}

/// Region-wise mean PC-to-PC error of `yp` against `y`.
pub fn region_error_report(yp: &PointCloud, y: &PointCloud, boxes: &[RegionBox]) -> RegionErrorReport {
    let errors = pc_to_pc_errors(yp, y);
    region_report_from_errors(yp, &errors, boxes)
}

pub(crate) fn region_report_from_errors(
    yp: &PointCloud,
    errors: &[f64],
    boxes: &[RegionBox],
) -> RegionErrorReport {
    let members = assign_regions(yp, boxes);
    let regions = boxes
        .iter()
        .zip(&members)
        .map(|(b, idx)| RegionError {
            name: b.name.clone(),
            count: idx.len(),
            mean: (!idx.is_empty())
                .then(|| idx.iter().map(|&i| errors[i]).sum::<f64>() / idx.len() as f64),
        })
        .collect();
    RegionErrorReport {
        regions,
        total_mean: errors.iter().sum::<f64>() / errors.len() as f64,
    }
}
