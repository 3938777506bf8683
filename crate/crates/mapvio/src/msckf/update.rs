//! Stacked EKF measurement updates.
//!
//! Both update paths share one pipeline: build per-feature residuals and
//! Jacobians against the pose clones, gate each feature with a chi-square
//! test on its innovation, stack the survivors, and apply a Joseph-form
//! covariance update.
//!
//! Captured-image tracks triangulate their own landmark, so its error must
//! be marginalized by projecting the rows onto the left null space of the
//! landmark Jacobian. Map-anchored features come with a known position in
//! map coordinates; their residuals instead absorb the uncertainty of the
//! map-to-global alignment through an inflated measurement covariance.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix6, Vector2, Vector3};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::map::CameraIntrinsics;
use crate::se3::{skew, so3_exp, Pose};

use super::triangulate::triangulate;
use super::FilterState;

/// Gate confidence: features whose innovation exceeds this chi-square
/// quantile are dropped.
const GATE_CONFIDENCE: f64 = 0.95;

const MIN_DEPTH: f64 = 1e-6;

/// One image feature tracked across frames. Observations are
/// `(timestamp, u, v)` in pixels, stamped on the camera clock.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub id: u32,
    pub obs: Vec<(f64, f64, f64)>,
}

/// A feature matched against the map: its known position in map
/// coordinates plus `(timestamp, u, v)` pixel observations in captured
/// images.
#[derive(Debug, Clone, PartialEq)]
pub struct MapMatch {
    pub landmark_id: u32,
    pub point_map: Vector3<f64>,
    pub obs: Vec<(f64, f64, f64)>,
}

/// Outcome counters for one stacked update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateReport {
    /// Features whose rows entered the final update.
    pub accepted: usize,
    /// Features discarded by the chi-square gate.
    pub rejected_gate: usize,
    /// Features discarded before gating: too few usable observations,
    /// triangulation failure, or a point behind a camera.
    pub rejected_geometry: usize,
    /// Residual rows applied, after projection and compression.
    pub rows: usize,
    /// Euclidean norm of the applied error-state correction.
    pub correction_norm: f64,
}

/// Measurement covariance inflation for an uncertain anchor frame:
/// `base + j * sigma * j^T`.
pub fn inflate_noise(
    base: &DMatrix<f64>,
    j: &DMatrix<f64>,
    sigma: &Matrix6<f64>,
) -> DMatrix<f64> {
    let sigma_d = DMatrix::from_fn(6, 6, |r, c| sigma[(r, c)]);
    base + j * sigma_d * j.transpose()
}

/// EKF update from triangulated feature tracks.
///
/// Each track is triangulated against the current clone estimates, its
/// landmark error is projected out, and the survivors of the chi-square
/// gate are stacked (and QR-compressed when taller than the state) into a
/// single update. Tracks that cannot be used are counted in the report,
/// never propagated as errors.
pub fn captured_update(
    state: &mut FilterState,
    tracks: &[FeatureTrack],
    intrinsics: &CameraIntrinsics,
    sigma_px: f64,
) -> Result<UpdateReport> {
    captured_update_impl(state, tracks, intrinsics, sigma_px, true)
}

fn captured_update_impl(
    state: &mut FilterState,
    tracks: &[FeatureTrack],
    intrinsics: &CameraIntrinsics,
    sigma_px: f64,
    compress: bool,
) -> Result<UpdateReport> {
    let sigma = sigma_px / intrinsics.focal;
    let dim = state.error_dim();
    let mut report = UpdateReport::default();
    let mut blocks: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();

    for track in tracks {
        let obs = resolve_observations(state, intrinsics, &track.obs);
        if obs.len() < 2 {
            report.rejected_geometry += 1;
            continue;
        }
        let views: Vec<(Pose, Vector2<f64>)> = obs
            .iter()
            .map(|&(idx, z)| (state.camera_pose_of_clone(idx), z))
            .collect();
        let point_g = match triangulate(&views) {
            Ok(p) => p,
            Err(
                Error::InvalidArgument(_)
                | Error::IllConditioned { .. }
                | Error::BehindCamera { .. }
                | Error::Divergence { .. },
            ) => {
                report.rejected_geometry += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let (h_x, h_f, r) = match build_track_system(state, &point_g, &obs) {
            Ok(sys) => sys,
            Err(_) => {
                report.rejected_geometry += 1;
                continue;
            }
        };
        let (h0, r0) = match project_feature_nullspace(h_x, h_f, r) {
            Ok(p) => p,
            Err(_) => {
                report.rejected_geometry += 1;
                continue;
            }
        };
        let n0 = DMatrix::<f64>::identity(r0.len(), r0.len()) * (sigma * sigma);
        if !passes_gate(state, &h0, &r0, &n0)? {
            report.rejected_gate += 1;
            continue;
        }
        report.accepted += 1;
        blocks.push((h0, r0));
    }

    if blocks.is_empty() {
        return Ok(report);
    }
    let total: usize = blocks.iter().map(|(_, r)| r.len()).sum();
    let mut h = DMatrix::<f64>::zeros(total, dim);
    let mut r = DVector::<f64>::zeros(total);
    let mut at = 0;
    for (hb, rb) in &blocks {
        h.view_mut((at, 0), (hb.nrows(), dim)).copy_from(hb);
        r.rows_mut(at, rb.len()).copy_from(rb);
        at += rb.len();
    }
    if compress && total > dim {
        let (hc, rc) = qr_compress(h, r);
        h = hc;
        r = rc;
    }
    let n = DMatrix::<f64>::identity(h.nrows(), h.nrows()) * (sigma * sigma);
    report.rows = h.nrows();
    report.correction_norm = ekf_update(state, &h, &r, &n)?;
    Ok(report)
}

/// EKF update from map-anchored features.
///
/// `map_to_global` takes map coordinates into the filter's global frame;
/// `sigma_align` is the covariance of its right-multiplicative twist error
/// and widens each feature's measurement noise through [`inflate_noise`].
/// Multi-observation matches additionally project out the anchor-point
/// direction, which makes this path coincide with [`captured_update`] when
/// the anchor equals the triangulated point and `sigma_align` is zero.
pub fn rendered_update(
    state: &mut FilterState,
    matches: &[MapMatch],
    map_to_global: &Pose,
    sigma_align: &Matrix6<f64>,
    intrinsics: &CameraIntrinsics,
    sigma_px: f64,
) -> Result<UpdateReport> {
    let sigma = sigma_px / intrinsics.focal;
    let dim = state.error_dim();
    let mut report = UpdateReport::default();
    let mut blocks: Vec<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> = Vec::new();

    for m in matches {
        let obs = resolve_observations(state, intrinsics, &m.obs);
        if obs.is_empty() {
            report.rejected_geometry += 1;
            continue;
        }
        let point_g = map_to_global.transform_point(&m.point_map);
        let (h_x, h_f, r) = match build_track_system(state, &point_g, &obs) {
            Ok(sys) => sys,
            Err(_) => {
                report.rejected_geometry += 1;
                continue;
            }
        };
        let rows = r.len();
        let j_align = anchor_jacobian(&h_f, map_to_global, &m.point_map);
        let base = DMatrix::<f64>::identity(rows, rows) * (sigma * sigma);
        let n_full = inflate_noise(&base, &j_align, sigma_align);
        let (h0, r0, n0) = if rows > 3 {
            match project_feature_nullspace_with_noise(h_x, h_f, r, n_full) {
                Ok(p) => p,
                Err(_) => {
                    report.rejected_geometry += 1;
                    continue;
                }
            }
        } else {
            (h_x, r, n_full)
        };
        if !passes_gate(state, &h0, &r0, &n0)? {
            report.rejected_gate += 1;
            continue;
        }
        report.accepted += 1;
        blocks.push((h0, r0, n0));
    }

    if blocks.is_empty() {
        return Ok(report);
    }
    let total: usize = blocks.iter().map(|(_, r, _)| r.len()).sum();
    let mut h = DMatrix::<f64>::zeros(total, dim);
    let mut r = DVector::<f64>::zeros(total);
    let mut n = DMatrix::<f64>::zeros(total, total);
    let mut at = 0;
    for (hb, rb, nb) in &blocks {
        let k = rb.len();
        h.view_mut((at, 0), (k, dim)).copy_from(hb);
        r.rows_mut(at, k).copy_from(rb);
        n.view_mut((at, at), (k, k)).copy_from(nb);
        at += k;
    }
    report.rows = h.nrows();
    report.correction_norm = ekf_update(state, &h, &r, &n)?;
    Ok(report)
}

/// Maps raw `(ts, u, v)` observations to `(clone index, normalized point)`
/// pairs, dropping observations whose clone is gone.
fn resolve_observations(
    state: &FilterState,
    intrinsics: &CameraIntrinsics,
    obs: &[(f64, f64, f64)],
) -> Vec<(usize, Vector2<f64>)> {
    let mut out = Vec::with_capacity(obs.len());
    for &(ts, u, v) in obs {
        if let Some(idx) = state.clone_at_image_time(ts) {
            let (x, y) = intrinsics.to_normalized(u, v);
            out.push((idx, Vector2::new(x, y)));
        }
    }
    out
}

/// Residuals and Jacobians of one feature against its observing clones.
///
/// Returns `(H_x, H_f, r)` where `H_x` is `2n x dim` over the error state,
/// `H_f` is `2n x 3` over the landmark position, and `r` stacks the
/// normalized-coordinate residuals.
fn build_track_system(
    state: &FilterState,
    point_g: &Vector3<f64>,
    obs: &[(usize, Vector2<f64>)],
) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let dim = state.error_dim();
    let rows = 2 * obs.len();
    let mut h_x = DMatrix::<f64>::zeros(rows, dim);
    let mut h_f = DMatrix::<f64>::zeros(rows, 3);
    let mut resid = DVector::<f64>::zeros(rows);
    let r_ic = state.extrinsics.r_itoc;
    for (k, &(idx, z)) in obs.iter().enumerate() {
        let c = &state.clones[idx];
        let y = c.r_gtoi * (point_g - c.p);
        let pc = r_ic * y + state.extrinsics.p_iinc;
        if pc.z <= MIN_DEPTH {
            return Err(Error::BehindCamera { z: pc.z });
        }
        let inv_z = 1.0 / pc.z;
        let jp = Matrix2x3::new(
            inv_z,
            0.0,
            -pc.x * inv_z * inv_z,
            0.0,
            inv_z,
            -pc.y * inv_z * inv_z,
        );
        let d_theta = jp * r_ic * skew(&y);
        let d_pos = -(jp * r_ic * c.r_gtoi);
        let d_point = jp * r_ic * c.r_gtoi;
        let off = state.clone_offset(idx);
        h_x.view_mut((2 * k, off), (2, 3)).copy_from(&d_theta);
        h_x.view_mut((2 * k, off + 3), (2, 3)).copy_from(&d_pos);
        h_f.view_mut((2 * k, 0), (2, 3)).copy_from(&d_point);
        resid[2 * k] = z.x - pc.x * inv_z;
        resid[2 * k + 1] = z.y - pc.y * inv_z;
    }
    Ok((h_x, h_f, resid))
}

/// Jacobian of the stacked measurement with respect to the
/// right-multiplicative twist error of the map-to-global alignment.
fn anchor_jacobian(
    h_f: &DMatrix<f64>,
    map_to_global: &Pose,
    point_map: &Vector3<f64>,
) -> DMatrix<f64> {
    let rot = map_to_global.rotation;
    let d_omega = -(rot * skew(point_map));
    let mut d = DMatrix::<f64>::zeros(3, 6);
    d.view_mut((0, 0), (3, 3)).copy_from(&d_omega);
    d.view_mut((0, 3), (3, 3)).copy_from(&rot);
    h_f * d
}

/// Householder reflectors of a thin QR factorization, reusable as left
/// multiplication by the transposed full Q.
struct Reflectors {
    steps: Vec<(usize, DVector<f64>, f64)>,
}

/// Upper-triangularizes the first `cols` columns of `target` in place and
/// records the reflectors.
fn qr_reflectors(target: &mut DMatrix<f64>, cols: usize) -> Reflectors {
    let rows = target.nrows();
    let mut steps = Vec::new();
    let limit = cols.min(target.ncols()).min(rows.saturating_sub(1));
    for k in 0..limit {
        let mut v = DVector::<f64>::zeros(rows - k);
        for i in k..rows {
            v[i - k] = target[(i, k)];
        }
        let alpha = v.norm();
        if alpha < 1e-300 {
            continue;
        }
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vn2 = v.norm_squared();
        if vn2 < 1e-300 {
            continue;
        }
        reflect_matrix(target, k, &v, vn2);
        steps.push((k, v, vn2));
    }
    Reflectors { steps }
}

impl Reflectors {
    fn apply_qt(&self, m: &mut DMatrix<f64>) {
        for (k, v, vn2) in &self.steps {
            reflect_matrix(m, *k, v, *vn2);
        }
    }

    fn apply_qt_vec(&self, r: &mut DVector<f64>) {
        for (k, v, vn2) in &self.steps {
            reflect_vector(r, *k, v, *vn2);
        }
    }
}

fn reflect_matrix(m: &mut DMatrix<f64>, k: usize, v: &DVector<f64>, vn2: f64) {
    let rows = m.nrows();
    for c in 0..m.ncols() {
        let mut dot = 0.0;
        for i in k..rows {
            dot += v[i - k] * m[(i, c)];
        }
        let scale = 2.0 * dot / vn2;
        for i in k..rows {
            m[(i, c)] -= scale * v[i - k];
        }
    }
}

fn reflect_vector(r: &mut DVector<f64>, k: usize, v: &DVector<f64>, vn2: f64) {
    let rows = r.len();
    let mut dot = 0.0;
    for i in k..rows {
        dot += v[i - k] * r[i];
    }
    let scale = 2.0 * dot / vn2;
    for i in k..rows {
        r[i] -= scale * v[i - k];
    }
}

/// Projects the rows onto the left null space of `h_f`, removing the
/// landmark error from the system. Requires more rows than landmark
/// dimensions.
fn project_feature_nullspace(
    mut h_x: DMatrix<f64>,
    mut h_f: DMatrix<f64>,
    mut r: DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let rows = h_f.nrows();
    if rows <= 3 {
        return Err(Error::IllConditioned {
            reason: "not enough rows to remove the landmark error".into(),
        });
    }
    let refl = qr_reflectors(&mut h_f, 3);
    refl.apply_qt(&mut h_x);
    refl.apply_qt_vec(&mut r);
    let kept = rows - 3;
    Ok((
        h_x.rows(3, kept).into_owned(),
        DVector::from(r.rows(3, kept).into_owned()),
    ))
}

/// Null-space projection that also rotates a full measurement covariance:
/// the kept noise block is `Q2^T N Q2`.
fn project_feature_nullspace_with_noise(
    mut h_x: DMatrix<f64>,
    mut h_f: DMatrix<f64>,
    mut r: DVector<f64>,
    mut n: DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let rows = h_f.nrows();
    if rows <= 3 {
        return Err(Error::IllConditioned {
            reason: "not enough rows to remove the landmark error".into(),
        });
    }
    let refl = qr_reflectors(&mut h_f, 3);
    refl.apply_qt(&mut h_x);
    refl.apply_qt_vec(&mut r);
    refl.apply_qt(&mut n);
    let mut nt = n.transpose();
    refl.apply_qt(&mut nt);
    let n_rot = nt.transpose();
    let kept = rows - 3;
    Ok((
        h_x.rows(3, kept).into_owned(),
        DVector::from(r.rows(3, kept).into_owned()),
        n_rot.view((3, 3), (kept, kept)).into_owned(),
    ))
}

/// Reduces a stack taller than the state to `dim` rows by rotating the
/// system with the Q of its QR factorization; the discarded rows carry no
/// state information. Valid for isotropic measurement noise only.
fn qr_compress(mut h: DMatrix<f64>, mut r: DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let dim = h.ncols();
    let rows = h.nrows();
    let refl = qr_reflectors(&mut h, dim);
    refl.apply_qt_vec(&mut r);
    let keep = dim.min(rows);
    (
        h.rows(0, keep).into_owned(),
        DVector::from(r.rows(0, keep).into_owned()),
    )
}

/// Chi-square innovation gate at [`GATE_CONFIDENCE`] with one degree of
/// freedom per residual row. A non-positive-definite innovation covariance
/// fails the gate rather than the whole update.
fn passes_gate(
    state: &FilterState,
    h: &DMatrix<f64>,
    r: &DVector<f64>,
    n: &DMatrix<f64>,
) -> Result<bool> {
    let s = h * &state.cov * h.transpose() + n;
    let chol = match s.cholesky() {
        Some(c) => c,
        None => return Ok(false),
    };
    let x = chol.solve(r);
    let gamma = r.dot(&x);
    let dof = r.len() as f64;
    let dist = ChiSquared::new(dof).map_err(|e| Error::IllConditioned {
        reason: format!("chi-square gate with dof {dof}: {e}"),
    })?;
    Ok(gamma <= dist.inverse_cdf(GATE_CONFIDENCE))
}

/// Joseph-form EKF step; returns the correction norm.
fn ekf_update(
    state: &mut FilterState,
    h: &DMatrix<f64>,
    r: &DVector<f64>,
    n: &DMatrix<f64>,
) -> Result<f64> {
    let s = h * &state.cov * h.transpose() + n;
    let chol = s.cholesky().ok_or_else(|| Error::IllConditioned {
        reason: "innovation covariance not positive definite".into(),
    })?;
    let hp = h * &state.cov;
    let kt = chol.solve(&hp);
    let k = kt.transpose();
    let dx = &k * r;
    if !dx.iter().all(|x| x.is_finite()) {
        return Err(Error::IllConditioned {
            reason: "non-finite state correction".into(),
        });
    }
    let dim = state.error_dim();
    let i_kh = DMatrix::<f64>::identity(dim, dim) - &k * h;
    let updated = &i_kh * &state.cov * i_kh.transpose() + &k * n * k.transpose();
    state.cov = (&updated + updated.transpose()) * 0.5;
    inject_correction(state, &dx);
    Ok(dx.norm())
}

/// Applies the estimated error to the nominal state: attitude corrections
/// act as left rotations, everything else is additive.
fn inject_correction(state: &mut FilterState, dx: &DVector<f64>) {
    let dtheta = Vector3::new(dx[0], dx[1], dx[2]);
    state.imu.r_gtoi = so3_exp(&(-dtheta)) * state.imu.r_gtoi;
    state.imu.p += Vector3::new(dx[3], dx[4], dx[5]);
    state.imu.v += Vector3::new(dx[6], dx[7], dx[8]);
    state.imu.bg += Vector3::new(dx[9], dx[10], dx[11]);
    state.imu.ba += Vector3::new(dx[12], dx[13], dx[14]);
    for (i, c) in state.clones.iter_mut().enumerate() {
        let off = 15 + 6 * i;
        let dth = Vector3::new(dx[off], dx[off + 1], dx[off + 2]);
        c.r_gtoi = so3_exp(&(-dth)) * c.r_gtoi;
        c.p += Vector3::new(dx[off + 3], dx[off + 4], dx[off + 5]);
    }
}
