//! Trajectory metrics: rigid alignment, absolute trajectory error, and
//! filter-consistency statistics.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::se3::so3_log;

/// Matching window for timestamp association between two trajectories.
pub const MATCH_TOLERANCE: f64 = 1e-3;

/// One stamped pose: `pose` maps reference-frame points into the body
/// frame, `position` is the body origin in the reference frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub ts: f64,
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
}

/// Absolute trajectory error after rigid alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub orientation_deg: f64,
    pub position_m: f64,
    pub matched_poses: usize,
}

/// Aggregate counters over every update of one kind in a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub updates: usize,
    pub features_accepted: usize,
    pub rejected_gate: usize,
    pub rejected_geometry: usize,
    pub rows: usize,
}

/// Everything a single experiment run reports. Wall-clock latency is
/// deliberately absent; it lives in the initialization evaluation flow so
/// run outputs stay bitwise reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub ate: AteReport,
    pub captured: UpdateStats,
    pub rendered: UpdateStats,
    /// Time-averaged normalized estimation error squared of the 15 IMU
    /// error states, when truth was available.
    pub mean_nees: f64,
}

/// Least-squares rigid transform `(r, t)` minimizing
/// `sum ||r * from_i + t - to_i||^2`, no scale.
pub fn umeyama_alignment(
    from: &[Vector3<f64>],
    to: &[Vector3<f64>],
) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if from.len() != to.len() || from.len() < 2 {
        return Err(Error::InvalidArgument(
            "alignment needs two equal-length point sets of at least 2 points".into(),
        ));
    }
    let n = from.len() as f64;
    let c_from: Vector3<f64> = from.iter().sum::<Vector3<f64>>() / n;
    let c_to: Vector3<f64> = to.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::<f64>::zeros();
    for (a, b) in from.iter().zip(to) {
        h += (b - c_to) * (a - c_from).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    Ok((r, c_to - r * c_from))
}

/// Pairs of indices `(i_a, i_b)` whose timestamps agree within
/// [`MATCH_TOLERANCE`]; each pose matches at most once, nearest first.
fn match_timestamps(a: &[StampedPose], b: &[StampedPose]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j0 = 0usize;
    for (i, pa) in a.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, pb) in b.iter().enumerate().skip(j0) {
            let d = (pb.ts - pa.ts).abs();
            if d <= MATCH_TOLERANCE && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((j, d));
            }
            if pb.ts > pa.ts + MATCH_TOLERANCE {
                break;
            }
        }
        if let Some((j, _)) = best {
            pairs.push((i, j));
            j0 = j + 1;
        }
    }
    pairs
}

/// RMS orientation (degrees) and position (meters) error between an
/// estimated and a ground-truth trajectory, after finding the rigid
/// transform between their reference frames from the matched positions.
pub fn compute_ate(est: &[StampedPose], gt: &[StampedPose]) -> Result<AteReport> {
    let pairs = match_timestamps(est, gt);
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "trajectories share only {} timestamps within {} s",
            pairs.len(),
            MATCH_TOLERANCE
        )));
    }
    let gt_pts: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| gt[j].position).collect();
    let est_pts: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est[i].position).collect();
    // r, t map ground-truth coordinates into the estimate's frame.
    let (r_align, t_align) = umeyama_alignment(&gt_pts, &est_pts)?;

    let mut pos_sq = 0.0;
    let mut rot_sq = 0.0;
    for &(i, j) in &pairs {
        let p_err = est[i].position - (r_align * gt[j].position + t_align);
        pos_sq += p_err.norm_squared();
        // Ground-truth body rotation expressed in the estimate's frame.
        let r_gt = gt[j].rotation * r_align.transpose();
        let ang = so3_log(&(est[i].rotation * r_gt.transpose())).norm();
        rot_sq += ang * ang;
    }
    let n = pairs.len() as f64;
    Ok(AteReport {
        orientation_deg: (rot_sq / n).sqrt().to_degrees(),
        position_m: (pos_sq / n).sqrt(),
        matched_poses: pairs.len(),
    })
}

/// Normalized estimation error squared `e' P^-1 e`.
pub fn nees(error: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::IllConditioned {
            reason: "consistency statistic needs a positive-definite covariance".into(),
        })?;
    Ok(error.dot(&chol.solve(error)))
}

/// Two-sided chi-square interval for the average NEES of `runs`
/// independent runs with `dim` error states, at the given confidence.
pub fn anees_interval(runs: usize, dim: usize, confidence: f64) -> (f64, f64) {
    let dof = (runs * dim) as f64;
    let chi = ChiSquared::new(dof).expect("positive dof");
    let alpha = 1.0 - confidence;
    (
        chi.inverse_cdf(alpha / 2.0) / runs as f64,
        chi.inverse_cdf(1.0 - alpha / 2.0) / runs as f64,
    )
}
