//! Inertial strapdown propagation and the error-state model around it.
//!
//! Frames and conventions, fixed across the crate:
//!
//! * `G` is the gravity-aligned global frame; gravity is the vector
//!   [`GRAVITY`] = (0, 0, -9.81) m/s^2, so +z points up.
//! * The state stores `r_gtoi`, the rotation taking G-frame vectors into the
//!   IMU frame. A body at rest measures `accel = -r_gtoi * GRAVITY + ba`,
//!   i.e. +9.81 along its up axis when level and unbiased.
//! * Measurements model: `gyro = omega_body + bg + ng`,
//!   `accel = r_gtoi * (a_world - GRAVITY) + ba + na`, with bias random
//!   walks driven by `nwg`, `nwa`.
//!
//! The error state is 15-dimensional, ordered
//! `[dtheta, dp, dv, dbg, dba]`, with the multiplicative attitude error
//! `r_gtoi = exp(-hat(dtheta)) * r_gtoi_est`. Noise channels are ordered
//! `[ng, nwg, na, nwa]`.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::se3::{skew, so3_exp};

/// Gravity in the global frame, metres per second squared.
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

/// One IMU reading. `gyro` in rad/s, `accel` in m/s^2, both in the IMU
/// frame and bias-contaminated as delivered by the sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub ts: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Continuous-time noise densities. Gyro/accel white noise in
/// rad/s/sqrt(Hz) and m/s^2/sqrt(Hz); bias walks in rad/s^2/sqrt(Hz) and
/// m/s^3/sqrt(Hz).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseParams {
    pub sigma_g: f64,
    pub sigma_wg: f64,
    pub sigma_a: f64,
    pub sigma_wa: f64,
}

impl NoiseParams {
    /// Diagonal spectral density of the stacked noise `[ng, nwg, na, nwa]`.
    pub fn process_noise(&self) -> SMatrix<f64, 12, 12> {
        let mut q = SMatrix::<f64, 12, 12>::zeros();
        for i in 0..3 {
            q[(i, i)] = self.sigma_g * self.sigma_g;
            q[(3 + i, 3 + i)] = self.sigma_wg * self.sigma_wg;
            q[(6 + i, 6 + i)] = self.sigma_a * self.sigma_a;
            q[(9 + i, 9 + i)] = self.sigma_wa * self.sigma_wa;
        }
        q
    }
}

/// Inertial navigation state at time `ts`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuState {
    pub ts: f64,
    /// Rotation from the global frame into the IMU frame.
    pub r_gtoi: Matrix3<f64>,
    /// IMU position in the global frame.
    pub p: Vector3<f64>,
    /// IMU velocity in the global frame.
    pub v: Vector3<f64>,
    pub bg: Vector3<f64>,
    pub ba: Vector3<f64>,
}

impl ImuState {
    pub fn identity_at(ts: f64) -> Self {
        ImuState {
            ts,
            r_gtoi: Matrix3::identity(),
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            bg: Vector3::zeros(),
            ba: Vector3::zeros(),
        }
    }
}

fn lerp(a: &Vector3<f64>, b: &Vector3<f64>, alpha: f64) -> Vector3<f64> {
    a + (b - a) * alpha
}

/// Time derivative of (r_itog, p, v) under bias-corrected measurements.
fn dynamics(
    r_itog: &Matrix3<f64>,
    v: &Vector3<f64>,
    omega_hat: &Vector3<f64>,
    accel_hat: &Vector3<f64>,
) -> (Matrix3<f64>, Vector3<f64>, Vector3<f64>) {
    (
        r_itog * skew(omega_hat),
        *v,
        r_itog * accel_hat + GRAVITY,
    )
}

/// Projects a near-rotation onto the closest orthonormal matrix.
fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

/// Fourth-order propagation of the mean over one measurement interval,
/// interpolating the two samples linearly in between. Biases are held
/// constant; the returned attitude is re-orthonormalized.
pub fn propagate_mean(state: &ImuState, s0: &ImuSample, s1: &ImuSample) -> Result<ImuState> {
    let dt = s1.ts - s0.ts;
    if dt <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "non-increasing sample pair: {} then {}",
            s0.ts, s1.ts
        )));
    }
    let w0 = s0.gyro - state.bg;
    let w1 = s1.gyro - state.bg;
    let a0 = s0.accel - state.ba;
    let a1 = s1.accel - state.ba;
    let wm = lerp(&w0, &w1, 0.5);
    let am = lerp(&a0, &a1, 0.5);

    let r0 = state.r_gtoi.transpose();
    let (k1_r, k1_p, k1_v) = dynamics(&r0, &state.v, &w0, &a0);
    let (k2_r, k2_p, k2_v) = dynamics(
        &(r0 + k1_r * (dt / 2.0)),
        &(state.v + k1_v * (dt / 2.0)),
        &wm,
        &am,
    );
    let (k3_r, k3_p, k3_v) = dynamics(
        &(r0 + k2_r * (dt / 2.0)),
        &(state.v + k2_v * (dt / 2.0)),
        &wm,
        &am,
    );
    let (k4_r, k4_p, k4_v) = dynamics(&(r0 + k3_r * dt), &(state.v + k3_v * dt), &w1, &a1);

    let r_itog = r0 + (k1_r + k2_r * 2.0 + k3_r * 2.0 + k4_r) * (dt / 6.0);
    let p = state.p + (k1_p + k2_p * 2.0 + k3_p * 2.0 + k4_p) * (dt / 6.0);
    let v = state.v + (k1_v + k2_v * 2.0 + k3_v * 2.0 + k4_v) * (dt / 6.0);

    Ok(ImuState {
        ts: s1.ts,
        r_gtoi: orthonormalize(&r_itog).transpose(),
        p,
        v,
        bg: state.bg,
        ba: state.ba,
    })
}

/// Continuous-time error-state Jacobians at the current estimate, evaluated
/// with the given (bias-contaminated) measurement. Returns `(F, G)` with
/// `d(dx)/dt = F dx + G n`.
pub fn error_state_jacobians(
    state: &ImuState,
    sample: &ImuSample,
) -> (SMatrix<f64, 15, 15>, SMatrix<f64, 15, 12>) {
    let omega_hat = sample.gyro - state.bg;
    let accel_hat = sample.accel - state.ba;
    let r_itog = state.r_gtoi.transpose();

    let mut f = SMatrix::<f64, 15, 15>::zeros();
    f.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-skew(&omega_hat)));
    f.fixed_view_mut::<3, 3>(0, 9)
        .copy_from(&(-Matrix3::identity()));
    f.fixed_view_mut::<3, 3>(3, 6).copy_from(&Matrix3::identity());
    f.fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&(-r_itog * skew(&accel_hat)));
    f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-r_itog));

    let mut g = SMatrix::<f64, 15, 12>::zeros();
    g.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-Matrix3::identity()));
    g.fixed_view_mut::<3, 3>(9, 3).copy_from(&Matrix3::identity());
    g.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-r_itog));
    g.fixed_view_mut::<3, 3>(12, 9)
        .copy_from(&Matrix3::identity());
    (f, g)
}

/// First-order discrete transition over `dt`.
pub fn state_transition(f: &SMatrix<f64, 15, 15>, dt: f64) -> SMatrix<f64, 15, 15> {
    SMatrix::<f64, 15, 15>::identity() + f * dt
}

/// Propagates a covariance whose leading 15x15 block is the inertial error
/// state; any trailing columns (clones) are carried through the cross terms.
///
/// `P_II <- Phi P_II Phi' + Phi G Q G' Phi' dt`, `P_IC <- Phi P_IC`.
/// The result is symmetrized.
pub fn propagate_covariance(
    p: &mut DMatrix<f64>,
    phi: &SMatrix<f64, 15, 15>,
    g: &SMatrix<f64, 15, 12>,
    q: &SMatrix<f64, 12, 12>,
    dt: f64,
) {
    let n = p.nrows();
    debug_assert!(n >= 15 && p.ncols() == n);
    let p_ii = p.view((0, 0), (15, 15)).clone_owned();
    let qd = phi * g * q * g.transpose() * phi.transpose() * dt;
    p.view_mut((0, 0), (15, 15))
        .copy_from(&(phi * p_ii * phi.transpose() + qd));
    if n > 15 {
        let p_ic = p.view((0, 15), (15, n - 15)).clone_owned();
        let new_ic = phi * p_ic;
        p.view_mut((0, 15), (15, n - 15)).copy_from(&new_ic);
        p.view_mut((15, 0), (n - 15, 15))
            .copy_from(&new_ic.transpose());
    }
    let sym = (p.clone() + p.transpose()) * 0.5;
    p.copy_from(&sym);
}

/// Roll/pitch attitude implied by a stationary accelerometer mean: the
/// returned `r_gtoi` maps global up onto the measured specific-force
/// direction and has no yaw component (its rotation axis is horizontal).
pub fn attitude_from_gravity(mean_accel: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let norm = mean_accel.norm();
    if norm < 1e-6 {
        return Err(Error::InvalidArgument(
            "stationary accelerometer mean is zero; cannot level".into(),
        ));
    }
    let up_in_imu = mean_accel / norm;
    let ez = Vector3::z();
    let c = ez.dot(&up_in_imu);
    let axis = ez.cross(&up_in_imu);
    let s = axis.norm();
    let r_itog = if s < 1e-12 {
        if c > 0.0 {
            Matrix3::identity()
        } else {
            // Upside down: roll by pi about x.
            so3_exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0))
        }
    } else {
        // Minimal rotation taking up_in_imu onto ez.
        so3_exp(&(axis * (-s.atan2(c) / s)))
    };
    Ok(r_itog.transpose())
}

/// Initial velocity and biases from a stationary prefix of the stream:
/// zero velocity, gyro mean as gyro bias, and the accelerometer mean minus
/// the expected gravity reaction as accelerometer bias.
pub fn bootstrap_vel_bias(
    samples: &[ImuSample],
    r_gtoi0: &Matrix3<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>, Vector3<f64>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "bootstrap window is empty".into(),
        ));
    }
    let n = samples.len() as f64;
    let mean_gyro: Vector3<f64> = samples.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n;
    let mean_accel: Vector3<f64> = samples.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
    let ba0 = mean_accel + r_gtoi0 * GRAVITY;
    Ok((Vector3::zeros(), mean_gyro, ba0))
}
