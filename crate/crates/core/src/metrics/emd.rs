use serde::{Deserialize, Serialize};

use super::assignment::{auction_assignment, optimal_assignment};
use crate::error::{Error, Result};
use crate::pointcloud::{dist2, PointCloud};

/// Largest cloud size solved exactly by default.
pub const DEFAULT_EXACT_LIMIT: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmdMethod {
    ExactAssignment,
    Approximate,
}

/// Earth mover's distance: the minimum over bijections of the summed
/// Euclidean transport distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmdResult {
    pub value: f64,
    pub method: EmdMethod,
    /// Upper bound on `value` minus the optimum; zero for exact results.
    pub bound_gap: f64,
}

impl EmdResult {
    pub fn per_point(&self, n: usize) -> f64 {
        self.value / n as f64
    }
}

fn check_sizes(y: &PointCloud, yp: &PointCloud) -> Result<()> {
    if y.len() != yp.len() {
        return Err(Error::InvalidInput(format!(
            "EMD needs equal-size clouds, got {} and {}",
            y.len(),
            yp.len()
        )));
    }
    Ok(())
}

fn transport_cost(y: &PointCloud, yp: &PointCloud, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| dist2(&y.points()[i], &yp.points()[j]).sqrt())
        .sum()
}

pub fn emd_exact(y: &PointCloud, yp: &PointCloud) -> Result<EmdResult> {
    emd_exact_limited(y, yp, DEFAULT_EXACT_LIMIT)
}

pub fn emd_exact_limited(y: &PointCloud, yp: &PointCloud, limit: usize) -> Result<EmdResult> {
    check_sizes(y, yp)?;
    if y.len() > limit {
        return Err(Error::EmdTooLarge {
            points: y.len(),
            limit,
        });
    }
    let (a, b) = (y.points(), yp.points());
    let assignment = optimal_assignment(a.len(), |i, j| dist2(&a[i], &b[j]).sqrt());
    Ok(EmdResult {
        value: transport_cost(y, yp, &assignment),
        method: EmdMethod::ExactAssignment,
        bound_gap: 0.0,
    })
}

pub fn emd_approx(y: &PointCloud, yp: &PointCloud, epsilon: f64) -> Result<EmdResult> {
    check_sizes(y, yp)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    let (a, b) = (y.points(), yp.points());
    let assignment = auction_assignment(a.len(), |i, j| dist2(&a[i], &b[j]).sqrt(), epsilon);
    Ok(EmdResult {
        value: transport_cost(y, yp, &assignment),
        method: EmdMethod::Approximate,
        bound_gap: a.len() as f64 * epsilon,
    })
}

/// Exact EMD up to `exact_limit` points, auction beyond.
pub fn emd(y: &PointCloud, yp: &PointCloud, exact_limit: usize, epsilon: f64) -> Result<EmdResult> {
    if y.len() <= exact_limit {
        emd_exact_limited(y, yp, exact_limit)
    } else {
        emd_approx(y, yp, epsilon)
    }
}
