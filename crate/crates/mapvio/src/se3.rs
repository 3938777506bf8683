//! Rigid-body geometry on SO(3)/SE(3) and the left-invariant metric family
//! used by the geodesic training loss.
//!
//! Conventions, fixed once for the whole crate:
//!
//! * Rotations are stored matrix-first. Quaternions appear only at I/O
//!   boundaries (trajectory files, filter attitude state) and follow the JPL
//!   convention: `q = [x y z w]`, hemisphere `w >= 0`, with
//!   `C(q) = (2w^2 - 1) I - 2 w [q_v]x + 2 q_v q_v^T`.
//!   For a frame rotated by +90 deg about z this gives `C[0][1] = +1`.
//! * [`se3_exp`] / [`se3_log`] are the plain matrix exponential and logarithm
//!   of the homogeneous 4x4 representation, so `se3_exp` of
//!   `omega = (0, 0, pi/2)` is an active +90 deg z rotation.
//! * The metric family is parametrized by `a` with `M = [[I, a], [a^T, 1]]`,
//!   positive definite iff `|a| < 1` (eigenvalues `{1, 1, 1 +- |a|}`);
//!   construction is capped at `|a| <= 0.99`.
//! * Geodesic distance uses the relative element under left translation,
//!   `xi = log(S1^-1 S2)`, making the distance exactly left-invariant.
//!
//! Numerical notes: trig coefficient ratios switch to series below
//! `theta^2 = 1e-8`; `so3_log` goes through the quaternion so the angle and
//! axis keep full precision near both `theta = 0` and `theta = pi`, where
//! trace/`vee` formulas cancel.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Cross-product matrix: `skew(a) * b == a x b`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] on antisymmetric input; reads the strict lower triangle.
#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Unit quaternion in JPL order `[x y z w]` with the hemisphere `w >= 0`.
///
/// Both invariants are established by the constructor and preserved by every
/// method, so a stored value can be written to disk verbatim.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JplQuaternion {
    x: f64,
    y: f64,
    z: f64,
    w: f64,
}

impl JplQuaternion {
    /// Accepts components with norm within 1e-6 of one, renormalizes exactly
    /// and flips to the `w >= 0` hemisphere.
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z + w * w).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidQuaternion { norm: n });
        }
        let s = if w < 0.0 { -1.0 / n } else { 1.0 / n };
        Ok(Self {
            x: x * s,
            y: y * s,
            z: z * s,
            w: w * s,
        })
    }

    pub fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            w: 1.0,
        }
    }

    /// Components in storage order `[x, y, z, w]`.
    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.w]
    }

    /// Rotation matrix `C(q)`; for the attitude quaternion `q_GI` this maps
    /// global coordinates into the IMU frame.
    pub fn to_rotation(&self) -> Matrix3<f64> {
        let qv = Vector3::new(self.x, self.y, self.z);
        let w = self.w;
        Matrix3::identity() * (2.0 * w * w - 1.0) - skew(&qv) * 2.0 * w
            + qv * qv.transpose() * 2.0
    }

    /// Inverse of [`Self::to_rotation`] via Shepperd's method, branching on
    /// the dominant diagonal entry so every branch divides by a value
    /// bounded away from zero.
    pub fn from_rotation(r: &Matrix3<f64>) -> Self {
        let t = r.trace();
        let (x, y, z, w);
        if t >= r[(0, 0)] && t >= r[(1, 1)] && t >= r[(2, 2)] {
            w = 0.5 * (1.0 + t).sqrt();
            let s = 0.25 / w;
            x = (r[(1, 2)] - r[(2, 1)]) * s;
            y = (r[(2, 0)] - r[(0, 2)]) * s;
            z = (r[(0, 1)] - r[(1, 0)]) * s;
        } else if r[(0, 0)] >= r[(1, 1)] && r[(0, 0)] >= r[(2, 2)] {
            x = 0.5 * (1.0 + 2.0 * r[(0, 0)] - t).sqrt();
            let s = 0.25 / x;
            y = (r[(0, 1)] + r[(1, 0)]) * s;
            z = (r[(0, 2)] + r[(2, 0)]) * s;
            w = (r[(1, 2)] - r[(2, 1)]) * s;
        } else if r[(1, 1)] >= r[(2, 2)] {
            y = 0.5 * (1.0 + 2.0 * r[(1, 1)] - t).sqrt();
            let s = 0.25 / y;
            x = (r[(0, 1)] + r[(1, 0)]) * s;
            z = (r[(1, 2)] + r[(2, 1)]) * s;
            w = (r[(2, 0)] - r[(0, 2)]) * s;
        } else {
            z = 0.5 * (1.0 + 2.0 * r[(2, 2)] - t).sqrt();
            let s = 0.25 / z;
            x = (r[(0, 2)] + r[(2, 0)]) * s;
            y = (r[(1, 2)] + r[(2, 1)]) * s;
            w = (r[(0, 1)] - r[(1, 0)]) * s;
        }
        let n = (x * x + y * y + z * z + w * w).sqrt();
        let s = if w < 0.0 { -1.0 / n } else { 1.0 / n };
        Self {
            x: x * s,
            y: y * s,
            z: z * s,
            w: w * s,
        }
    }
}

/// Element of se(3): body angular rate `omega` and linear part `vel`,
/// in that order wherever the six components are stacked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub vel: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, vel: Vector3<f64>) -> Self {
        Self { omega, vel }
    }

    pub fn zero() -> Self {
        Self {
            omega: Vector3::zeros(),
            vel: Vector3::zeros(),
        }
    }

    /// Stacked `[omega; vel]`.
    pub fn as_vector(&self) -> nalgebra::Vector6<f64> {
        nalgebra::Vector6::new(
            self.omega.x, self.omega.y, self.omega.z, self.vel.x, self.vel.y, self.vel.z,
        )
    }

    pub fn from_vector(v: &nalgebra::Vector6<f64>) -> Self {
        Self {
            omega: Vector3::new(v[0], v[1], v[2]),
            vel: Vector3::new(v[3], v[4], v[5]),
        }
    }

    /// 4x4 Lie-algebra matrix `[[skew(omega), vel], [0, 0]]`.
    pub fn hat(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&self.omega));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.vel);
        m
    }
}

/// SE(3) element as rotation matrix plus translation; composition and
/// inversion match the homogeneous 4x4 representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// `self * rhs` as homogeneous matrices: applies `rhs` first.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Frobenius measure of `R^T R - I`; zero for a valid member.
    pub fn orthonormality_defect(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }
}

/// Parameter `a` of the metric family `M = [[I, a], [a^T, 1]]`.
///
/// Positive definiteness requires `|a| < 1`; construction enforces the
/// working cap `|a| <= 0.99` so downstream quadratic forms stay bounded
/// away from singularity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricParam {
    a: Vector3<f64>,
}

impl MetricParam {
    pub const MAX_NORM: f64 = 0.99;

    pub fn new(a: Vector3<f64>) -> Result<Self> {
        let n = a.norm();
        if !n.is_finite() || n > Self::MAX_NORM {
            return Err(Error::MetricDomain { norm: n });
        }
        Ok(Self { a })
    }

    /// Isotropic member `a = 0`, i.e. `M = I`.
    pub fn isotropic() -> Self {
        Self {
            a: Vector3::zeros(),
        }
    }

    pub fn a(&self) -> Vector3<f64> {
        self.a
    }

    /// The symmetric 4x4 metric matrix. Eigenvalues are
    /// `{1, 1, 1 - |a|, 1 + |a|}`.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.a);
        m.fixed_view_mut::<1, 3>(3, 0)
            .copy_from(&self.a.transpose());
        m
    }
}

// Each coefficient ratio below switches to its Taylor series where the
// closed form starts to cancel; thresholds are set so truncation error and
// cancellation error are both far below 1e-12.

/// `sin(theta)/theta` continued through zero.
#[inline]
fn sinc(theta: f64) -> f64 {
    let t2 = theta * theta;
    if t2 < 1e-8 {
        1.0 - t2 / 6.0 + t2 * t2 / 120.0
    } else {
        theta.sin() / theta
    }
}

/// `(1 - cos(theta))/theta^2` continued through zero.
#[inline]
fn one_minus_cos_over_sq(theta: f64) -> f64 {
    let t2 = theta * theta;
    if t2 < 1e-4 {
        0.5 - t2 / 24.0 + t2 * t2 / 720.0
    } else {
        (1.0 - theta.cos()) / t2
    }
}

/// `(theta - sin(theta))/theta^3` continued through zero.
#[inline]
fn theta_minus_sin_over_cube(theta: f64) -> f64 {
    let t2 = theta * theta;
    if t2 < 1e-4 {
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (theta - theta.sin()) / (t2 * theta)
    }
}

/// Rodrigues form of the SO(3) exponential.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    Matrix3::identity() + k * sinc(theta) + k * k * one_minus_cos_over_sq(theta)
}

/// SO(3) logarithm; the returned vector has angle in `[0, pi]`.
///
/// Routed through the quaternion: Shepperd's dominant branch has no
/// cancellation at any angle, and `2 atan2(|q_v|, w)` keeps full precision
/// at both ends of the range, where the `acos` of the trace loses digits.
/// At `theta = pi` the axis sign is inherently ambiguous and one
/// representative is returned.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = JplQuaternion::from_rotation(r).as_array();
    // C(q) is the transposed active matrix, so the active log negates q_v.
    let qv = Vector3::new(-q[0], -q[1], -q[2]);
    let n = qv.norm();
    if n < 1e-9 {
        // theta/2 ~ |q_v|; the cubic correction is below machine precision.
        return qv * 2.0;
    }
    qv * (2.0 * n.atan2(q[3]) / n)
}

/// SE(3) exponential, equal to the matrix exponential of [`Twist::hat`].
pub fn se3_exp(t: &Twist) -> Pose {
    let theta = t.omega.norm();
    let k = skew(&t.omega);
    let kk = k * k;
    let r = Matrix3::identity() + k * sinc(theta) + kk * one_minus_cos_over_sq(theta);
    let v = Matrix3::identity()
        + k * one_minus_cos_over_sq(theta)
        + kk * theta_minus_sin_over_cube(theta);
    Pose {
        rotation: r,
        translation: v * t.vel,
    }
}

/// SE(3) logarithm, inverse of [`se3_exp`] for angles in `[0, pi]`.
pub fn se3_log(p: &Pose) -> Twist {
    let omega = so3_log(&p.rotation);
    let theta = omega.norm();
    let k = skew(&omega);
    let kk = k * k;
    // V^-1 = I - K/2 + c2 K^2 with c2 = (1 - A/(2B)) / theta^2; the ratio is
    // regular on (0, pi] and extends smoothly through zero. The subtraction
    // cancels below theta ~ 0.1, where the series takes over.
    let c2 = {
        let t2 = theta * theta;
        if t2 < 1e-2 {
            1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
        } else {
            let a = sinc(theta);
            let b = one_minus_cos_over_sq(theta);
            (1.0 - a / (2.0 * b)) / t2
        }
    };
    let v_inv = Matrix3::identity() - k * 0.5 + kk * c2;
    Twist {
        omega,
        vel: v_inv * p.translation,
    }
}

/// Inner product from the defining trace form `tr(x1^T x2 M)`.
pub fn inner_trace(t1: &Twist, t2: &Twist, metric: &MetricParam) -> f64 {
    (t1.hat().transpose() * t2.hat() * metric.matrix()).trace()
}

/// Closed form of [`inner_trace`]:
/// `2 w1.w2 + w1.(a x v2) - v1.(a x w2) + v1.v2`,
/// i.e. the quadratic form with block matrix `[[2I, skew(a)], [-skew(a), I]]`.
pub fn inner_closed(t1: &Twist, t2: &Twist, metric: &MetricParam) -> f64 {
    let a = metric.a();
    2.0 * t1.omega.dot(&t2.omega) + t1.omega.dot(&a.cross(&t2.vel))
        - t1.vel.dot(&a.cross(&t2.omega))
        + t1.vel.dot(&t2.vel)
}

/// Squared geodesic distance `|log(S1^-1 S2)|^2_M`.
///
/// Left-invariant by construction: the relative element `S1^-1 S2` is
/// unchanged by any common left factor. Symmetric because inversion negates
/// the logarithm and the quadratic form is even.
pub fn geodesic_dist_sq(s1: &Pose, s2: &Pose, metric: &MetricParam) -> f64 {
    let rel = s1.inverse().compose(s2);
    let xi = se3_log(&rel);
    inner_closed(&xi, &xi, metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_unit(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    fn rand_vec(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            (rng.gen::<f64>() * 2.0 - 1.0) * scale,
            (rng.gen::<f64>() * 2.0 - 1.0) * scale,
            (rng.gen::<f64>() * 2.0 - 1.0) * scale,
        )
    }

    fn rand_pose(rng: &mut impl Rng, max_angle: f64) -> Pose {
        let omega = rand_unit(rng) * rng.gen::<f64>() * max_angle;
        let mut p = se3_exp(&Twist::new(omega, Vector3::zeros()));
        p.translation = rand_vec(rng, 1.0);
        p
    }

    fn rand_metric(rng: &mut impl Rng) -> MetricParam {
        MetricParam::new(rand_unit(rng) * rng.gen::<f64>() * 0.99).unwrap()
    }

    /// Oracle: active Rodrigues rotation of a vector about a unit axis.
    fn rodrigues_rotate(axis: &Vector3<f64>, angle: f64, v: &Vector3<f64>) -> Vector3<f64> {
        v * angle.cos() + axis.cross(v) * angle.sin() + axis * axis.dot(v) * (1.0 - angle.cos())
    }

    /// Oracle: matrix exponential by scaling and squaring with a truncated
    /// Taylor series, independent of all closed forms above.
    fn expm4(x: &Matrix4<f64>) -> Matrix4<f64> {
        let mut s = 0u32;
        let mut norm = x.norm();
        while norm > 0.25 {
            norm /= 2.0;
            s += 1;
        }
        let xs = x / 2f64.powi(s as i32);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..20 {
            term = term * xs / k as f64;
            sum += term;
        }
        for _ in 0..s {
            sum = sum * sum;
        }
        sum
    }

    #[test]
    fn quat_convention_z90() {
        // +90 deg about z in the JPL passive convention.
        let h = std::f64::consts::FRAC_PI_4;
        let q = JplQuaternion::new(0.0, 0.0, h.sin(), h.cos()).unwrap();
        let r = q.to_rotation();
        let expected = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(r, expected, epsilon = 1e-15);
    }

    #[test]
    fn quat_to_rot_matches_transposed_rodrigues() {
        // C(q) must equal the transpose of the active Rodrigues rotation for
        // the same axis and angle, checked column by column.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let axis = rand_unit(&mut rng);
            let angle = rng.gen::<f64>() * std::f64::consts::PI;
            let h = angle / 2.0;
            let q = JplQuaternion::new(
                axis.x * h.sin(),
                axis.y * h.sin(),
                axis.z * h.sin(),
                h.cos(),
            )
            .unwrap();
            let c = q.to_rotation();
            for i in 0..3 {
                let e = Vector3::from_fn(|r, _| if r == i { 1.0 } else { 0.0 });
                let active = rodrigues_rotate(&axis, angle, &e);
                // Row i of C is the active image of e_i.
                let row = c.row(i).transpose();
                assert_relative_eq!(row, active, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn quat_roundtrip_up_to_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let axis = rand_unit(&mut rng);
            // Spread angles across all Shepperd branches including near pi.
            let angle = rng.gen::<f64>() * std::f64::consts::PI * 0.9999;
            let h = angle / 2.0;
            let q = JplQuaternion::new(
                axis.x * h.sin(),
                axis.y * h.sin(),
                axis.z * h.sin(),
                h.cos(),
            )
            .unwrap();
            let back = JplQuaternion::from_rotation(&q.to_rotation());
            let a = q.as_array();
            let b = back.as_array();
            for i in 0..4 {
                assert!(
                    (a[i] - b[i]).abs() < 1e-12,
                    "component {i}: {} vs {}",
                    a[i],
                    b[i]
                );
            }
        }
    }

    #[test]
    fn quat_constructor_rejects_far_from_unit() {
        assert!(JplQuaternion::new(0.0, 0.0, 0.0, 1.1).is_err());
        assert!(JplQuaternion::new(0.0, 0.0, 0.0, 0.0).is_err());
        // Hemisphere flip on negative scalar part.
        let q = JplQuaternion::new(0.1, 0.2, 0.2, -(1.0f64 - 0.09).sqrt()).unwrap();
        assert!(q.as_array()[3] > 0.0);
    }

    #[test]
    fn rotation_orthonormal_after_1000_quaternion_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = Matrix3::identity();
        for _ in 0..1000 {
            let step = so3_exp(&rand_vec(&mut rng, 1.0));
            r = JplQuaternion::from_rotation(&(step * r)).to_rotation();
        }
        let defect = (r.transpose() * r - Matrix3::identity()).norm();
        assert!(defect < 1e-9, "orthonormality defect {defect}");
    }

    #[test]
    fn se3_exp_matches_matrix_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let t = Twist::new(
                rand_unit(&mut rng) * rng.gen::<f64>() * 3.1,
                rand_vec(&mut rng, 2.0),
            );
            let p = se3_exp(&t);
            let oracle = expm4(&t.hat());
            assert_relative_eq!(p.to_homogeneous(), oracle, epsilon = 1e-12);
        }
    }

    #[test]
    fn se3_exp_zero_is_identity() {
        let p = se3_exp(&Twist::zero());
        assert_eq!(p.rotation, Matrix3::identity());
        assert_eq!(p.translation, Vector3::zeros());
    }

    #[test]
    fn se3_exp_z90_pure_rotation() {
        let t = Twist::new(Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2), Vector3::zeros());
        let p = se3_exp(&t);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(p.rotation, expected, epsilon = 1e-15);
        assert_relative_eq!(p.translation, Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn se3_log_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let t = Twist::new(
                rand_unit(&mut rng) * rng.gen::<f64>() * 3.14,
                rand_vec(&mut rng, 2.0),
            );
            let back = se3_log(&se3_exp(&t));
            assert_relative_eq!(back.omega, t.omega, epsilon = 1e-9);
            assert_relative_eq!(back.vel, t.vel, epsilon = 1e-9);
        }
    }

    #[test]
    fn se3_log_small_angle_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for scale in [1e-12, 1e-9, 1e-6, 1e-4] {
            for _ in 0..50 {
                let t = Twist::new(rand_unit(&mut rng) * scale, rand_vec(&mut rng, 1.0));
                let back = se3_log(&se3_exp(&t));
                assert!((back.omega - t.omega).norm() <= 1e-12 + 1e-9 * scale);
                assert_relative_eq!(back.vel, t.vel, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn so3_log_near_pi_stable_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let axis = rand_unit(&mut rng);
            for angle in [
                std::f64::consts::PI,
                std::f64::consts::PI - 1e-7,
                std::f64::consts::PI - 1e-3,
            ] {
                let r = so3_exp(&(axis * angle));
                let w = so3_log(&r);
                assert!(
                    (w.norm() - angle).abs() < 1e-9,
                    "angle error {} at {angle}",
                    (w.norm() - angle).abs()
                );
                // Axis matches up to the inherent sign ambiguity at pi.
                let d = (w / w.norm() - axis).norm().min((w / w.norm() + axis).norm());
                assert!(d < 1e-6, "axis error {d} at angle {angle}");
            }
        }
    }

    #[test]
    fn metric_matrix_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let a = rand_unit(&mut rng) * rng.gen::<f64>() * 0.99;
            let m = MetricParam::new(a).unwrap();
            let mut ev: Vec<f64> = m
                .matrix()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .collect();
            ev.sort_by(|p, q| p.partial_cmp(q).unwrap());
            let n = a.norm();
            let expected = [1.0 - n, 1.0, 1.0, 1.0 + n];
            for (got, want) in ev.iter().zip(expected.iter()) {
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn metric_param_domain() {
        assert!(MetricParam::new(Vector3::new(0.99, 0.0, 0.0)).is_ok());
        assert!(MetricParam::new(Vector3::new(0.991, 0.0, 0.0)).is_err());
        assert!(MetricParam::new(Vector3::new(1.0, 0.0, 0.0)).is_err());
        assert!(MetricParam::new(Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn inner_closed_equals_trace_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let t1 = Twist::new(rand_vec(&mut rng, 2.0), rand_vec(&mut rng, 2.0));
            let t2 = Twist::new(rand_vec(&mut rng, 2.0), rand_vec(&mut rng, 2.0));
            let m = rand_metric(&mut rng);
            let d = (inner_closed(&t1, &t2, &m) - inner_trace(&t1, &t2, &m)).abs();
            assert!(d < 1e-12, "trace/closed mismatch {d}");
        }
    }

    #[test]
    fn inner_known_value() {
        let t1 = Twist::new(Vector3::new(0.0, 0.0, 1.0), Vector3::zeros());
        let t2 = Twist::new(Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0));
        let m = MetricParam::new(Vector3::new(0.5, 0.0, 0.0)).unwrap();
        assert_relative_eq!(inner_closed(&t1, &t2, &m), -0.5, epsilon = 1e-15);
        assert_relative_eq!(inner_trace(&t1, &t2, &m), -0.5, epsilon = 1e-15);
    }

    #[test]
    fn inner_positive_definite_on_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let t = Twist::new(rand_vec(&mut rng, 3.0), rand_vec(&mut rng, 3.0));
            if t.omega.norm() + t.vel.norm() < 1e-9 {
                continue;
            }
            let m = rand_metric(&mut rng);
            assert!(inner_closed(&t, &t, &m) > 0.0);
        }
    }

    #[test]
    fn geodesic_identical_poses_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let s = rand_pose(&mut rng, 3.0);
            let m = rand_metric(&mut rng);
            assert_eq!(geodesic_dist_sq(&s, &s, &m), 0.0);
        }
    }

    #[test]
    fn geodesic_left_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..300 {
            let s1 = rand_pose(&mut rng, 3.0);
            let s2 = rand_pose(&mut rng, 3.0);
            let l = rand_pose(&mut rng, 3.0);
            let m = rand_metric(&mut rng);
            let d0 = geodesic_dist_sq(&s1, &s2, &m);
            let d1 = geodesic_dist_sq(&l.compose(&s1), &l.compose(&s2), &m);
            assert!((d0 - d1).abs() < 1e-9 * d0.max(1.0), "{d0} vs {d1}");
        }
    }

    #[test]
    fn geodesic_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..300 {
            let s1 = rand_pose(&mut rng, 3.0);
            let s2 = rand_pose(&mut rng, 3.0);
            let m = rand_metric(&mut rng);
            let d12 = geodesic_dist_sq(&s1, &s2, &m);
            let d21 = geodesic_dist_sq(&s2, &s1, &m);
            assert!((d12 - d21).abs() < 1e-9 * d12.max(1.0));
        }
    }

    #[test]
    fn geodesic_additive_along_geodesic() {
        // Distances add exactly for a midpoint taken on the geodesic through
        // the relative logarithm. For three arbitrary poses the log-norm
        // quasi-distance of this family can exceed the two-leg sum, so no
        // general triangle bound is asserted here.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..1000 {
            let s1 = rand_pose(&mut rng, 3.0);
            let s3 = rand_pose(&mut rng, 3.0);
            let m = rand_metric(&mut rng);
            let s: f64 = rng.gen();
            let xi = se3_log(&s1.inverse().compose(&s3));
            let mid = s1.compose(&se3_exp(&Twist::from_vector(&(xi.as_vector() * s))));
            let d13 = geodesic_dist_sq(&s1, &s3, &m).sqrt();
            let d12 = geodesic_dist_sq(&s1, &mid, &m).sqrt();
            let d23 = geodesic_dist_sq(&mid, &s3, &m).sqrt();
            assert!(
                (d12 + d23 - d13).abs() < 1e-9,
                "additivity violated by {}",
                (d12 + d23 - d13).abs()
            );
            assert!(d13 <= d12 + d23 + 1e-9);
        }
    }

    #[test]
    fn pose_compose_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..200 {
            let p = rand_pose(&mut rng, 3.0);
            let q = rand_pose(&mut rng, 3.0);
            let r = p.compose(&q);
            assert_relative_eq!(
                r.to_homogeneous(),
                p.to_homogeneous() * q.to_homogeneous(),
                epsilon = 1e-13
            );
            let i = p.compose(&p.inverse());
            assert_relative_eq!(i.rotation, Matrix3::identity(), epsilon = 1e-13);
            assert_relative_eq!(i.translation, Vector3::zeros(), epsilon = 1e-13);
        }
    }
}
