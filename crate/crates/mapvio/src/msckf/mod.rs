//! Sliding-window error-state filter with stochastic cloning.
//!
//! The error state stacks the 15-dimensional inertial block
//! `[dtheta, dp, dv, dbg, dba]` followed by one `[dtheta, dp]` pair per
//! pose clone, newest clone last, so the covariance is `(15 + 6m)` square.
//! Camera-IMU extrinsics and the camera time offset are carried as fixed
//! calibration, not estimated.
//!
//! Two measurement paths correct the state: feature tracks from the live
//! camera ([`update::captured_update`]) and map-anchored features from
//! rendered views ([`update::rendered_update`]). Both land in the same
//! stacked linear update with chi-square gating and a Joseph-form
//! covariance step.

mod triangulate;
mod update;

pub use triangulate::triangulate;
pub use update::{
    captured_update, inflate_noise, rendered_update, FeatureTrack, MapMatch, UpdateReport,
};

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::imu::{
    error_state_jacobians, propagate_covariance, propagate_mean, state_transition, ImuSample,
    ImuState, NoiseParams,
};
use crate::se3::Pose;

/// Fixed camera-IMU calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    /// Rotation from the IMU frame into the camera frame.
    pub r_itoc: Matrix3<f64>,
    /// IMU origin expressed in the camera frame.
    pub p_iinc: Vector3<f64>,
    /// Seconds the camera clock runs ahead of the IMU clock: an image
    /// stamped `t` was exposed at IMU time `t - time_offset`.
    pub time_offset: f64,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Extrinsics {
            r_itoc: Matrix3::identity(),
            p_iinc: Vector3::zeros(),
            time_offset: 0.0,
        }
    }
}

/// Pose clone: the IMU pose frozen at a camera timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloneState {
    pub ts: f64,
    pub r_gtoi: Matrix3<f64>,
    pub p: Vector3<f64>,
}

/// Filter state: inertial estimate, pose clones oldest-first, and the joint
/// error covariance.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub imu: ImuState,
    pub clones: Vec<CloneState>,
    pub cov: DMatrix<f64>,
    pub extrinsics: Extrinsics,
    pub max_clones: usize,
}

/// Default sliding-window length.
pub const MAX_CLONES: usize = 11;

impl FilterState {
    /// Starts the filter at `imu` with the given 15x15 initial covariance.
    pub fn new(
        imu: ImuState,
        p0: &DMatrix<f64>,
        extrinsics: Extrinsics,
        max_clones: usize,
    ) -> Result<Self> {
        if p0.nrows() != 15 || p0.ncols() != 15 {
            return Err(Error::InvalidArgument(format!(
                "initial covariance must be 15x15, got {}x{}",
                p0.nrows(),
                p0.ncols()
            )));
        }
        if max_clones < 2 {
            return Err(Error::InvalidArgument(
                "window must hold at least two clones".into(),
            ));
        }
        Ok(FilterState {
            imu,
            clones: Vec::new(),
            cov: p0.clone(),
            extrinsics,
            max_clones,
        })
    }

    pub fn error_dim(&self) -> usize {
        15 + 6 * self.clones.len()
    }

    /// Column/row offset of clone `idx` in the error state.
    pub fn clone_offset(&self, idx: usize) -> usize {
        15 + 6 * idx
    }

    /// Mean and covariance propagation over one IMU interval. Jacobians are
    /// evaluated at the interval start.
    pub fn propagate(&mut self, s0: &ImuSample, s1: &ImuSample, noise: &NoiseParams) -> Result<()> {
        let dt = s1.ts - s0.ts;
        let (f, g) = error_state_jacobians(&self.imu, s0);
        let phi = state_transition(&f, dt);
        propagate_covariance(&mut self.cov, &phi, &g, &noise.process_noise(), dt);
        self.imu = propagate_mean(&self.imu, s0, s1)?;
        Ok(())
    }

    /// Clones the current IMU pose at `ts`. The new clone's error is a copy
    /// of the current attitude and position errors, so its covariance rows
    /// are copies of the corresponding rows of the joint covariance.
    pub fn augment_clone(&mut self, ts: f64) -> Result<()> {
        if self.clones.len() >= self.max_clones {
            return Err(Error::InvalidArgument(format!(
                "window full at {} clones; marginalize first",
                self.clones.len()
            )));
        }
        if let Some(last) = self.clones.last() {
            if ts <= last.ts {
                return Err(Error::InvalidArgument(format!(
                    "clone timestamps must increase: {} after {}",
                    ts, last.ts
                )));
            }
        }
        let n = self.error_dim();
        let mut grown = DMatrix::<f64>::zeros(n + 6, n + 6);
        grown.view_mut((0, 0), (n, n)).copy_from(&self.cov);
        // J selects [dtheta; dp] of the inertial block.
        let mut j = DMatrix::<f64>::zeros(6, n);
        for i in 0..6 {
            j[(i, i)] = 1.0;
        }
        let jp = &j * &self.cov;
        grown.view_mut((n, 0), (6, n)).copy_from(&jp);
        grown
            .view_mut((0, n), (n, 6))
            .copy_from(&jp.transpose());
        grown
            .view_mut((n, n), (6, 6))
            .copy_from(&(&jp * j.transpose()));
        self.cov = grown;
        self.clones.push(CloneState {
            ts,
            r_gtoi: self.imu.r_gtoi,
            p: self.imu.p,
        });
        Ok(())
    }

    /// Drops clone `idx` and its covariance rows and columns.
    pub fn marginalize_clone(&mut self, idx: usize) -> Result<()> {
        if idx >= self.clones.len() {
            return Err(Error::InvalidArgument(format!(
                "no clone at index {idx}"
            )));
        }
        let off = self.clone_offset(idx);
        let n = self.error_dim();
        let keep: Vec<usize> = (0..n).filter(|&i| i < off || i >= off + 6).collect();
        let mut shrunk = DMatrix::<f64>::zeros(n - 6, n - 6);
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                shrunk[(a, b)] = self.cov[(i, j)];
            }
        }
        self.cov = shrunk;
        self.clones.remove(idx);
        Ok(())
    }

    /// Index of the clone nearest in time to `ts`; an equidistant pair
    /// resolves to the earlier clone.
    pub fn select_closest_clone(&self, ts: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in self.clones.iter().enumerate() {
            let d = (c.ts - ts).abs();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Index of the clone at exactly (within 1 us) the corrected image
    /// time `ts - time_offset`.
    pub fn clone_at_image_time(&self, image_ts: f64) -> Option<usize> {
        let t = image_ts - self.extrinsics.time_offset;
        self.clones.iter().position(|c| (c.ts - t).abs() < 1e-6)
    }

    /// World-to-camera map of clone `idx` under the fixed extrinsics.
    pub fn camera_pose_of_clone(&self, idx: usize) -> Pose {
        let c = &self.clones[idx];
        let rot = self.extrinsics.r_itoc * c.r_gtoi;
        Pose::new(rot, -(rot * c.p) + self.extrinsics.p_iinc)
    }

    /// Camera center of clone `idx` in the global frame.
    pub fn camera_center_of_clone(&self, idx: usize) -> Vector3<f64> {
        let c = &self.clones[idx];
        c.p - c.r_gtoi.transpose() * (self.extrinsics.r_itoc.transpose() * self.extrinsics.p_iinc)
    }
}
