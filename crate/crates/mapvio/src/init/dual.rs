//! Forward-mode differentiation of the geodesic loss head.
//!
//! [`geodesic_sq_and_grad`] evaluates the squared geodesic distance between
//! `exp(z)` and a ground-truth pose together with its exact gradient in the
//! six components of `z`, by running the exp / compose / log / quadratic
//! chain on six-lane dual numbers. The scalar pipeline mirrors the branch
//! structure of the plain `f64` implementation in [`crate::se3`], so the
//! value lane agrees with [`crate::se3::geodesic_dist_sq`] to rounding and
//! every branch stays differentiable on its own domain (series branches are
//! polynomials in `theta^2`, avoiding `sqrt` at zero).

use nalgebra::Vector6;

use crate::se3::{MetricParam, Pose};

/// Scalar carrying a value and six partial derivatives.
#[derive(Debug, Clone, Copy)]
struct Dual {
    v: f64,
    d: [f64; 6],
}

impl Dual {
    fn con(v: f64) -> Self {
        Dual { v, d: [0.0; 6] }
    }

    fn var(v: f64, lane: usize) -> Self {
        let mut d = [0.0; 6];
        d[lane] = 1.0;
        Dual { v, d }
    }

    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        let s = 0.5 / r;
        Dual {
            v: r,
            d: self.d.map(|g| g * s),
        }
    }

    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        Dual {
            v: s,
            d: self.d.map(|g| g * c),
        }
    }

    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        Dual {
            v: c,
            d: self.d.map(|g| -g * s),
        }
    }

    /// Four-quadrant arctangent; the partials follow the usual
    /// `(x dy - y dx) / (x^2 + y^2)` rule.
    fn atan2(self, x: Dual) -> Self {
        let y = self;
        let denom = x.v * x.v + y.v * y.v;
        let mut d = [0.0; 6];
        for i in 0..6 {
            d[i] = (x.v * y.d[i] - y.v * x.d[i]) / denom;
        }
        Dual {
            v: y.v.atan2(x.v),
            d,
        }
    }
}

impl std::ops::Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        let mut d = self.d;
        for i in 0..6 {
            d[i] += rhs.d[i];
        }
        Dual {
            v: self.v + rhs.v,
            d,
        }
    }
}

impl std::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        let mut d = self.d;
        for i in 0..6 {
            d[i] -= rhs.d[i];
        }
        Dual {
            v: self.v - rhs.v,
            d,
        }
    }
}

impl std::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        let mut d = [0.0; 6];
        for i in 0..6 {
            d[i] = self.d[i] * rhs.v + self.v * rhs.d[i];
        }
        Dual {
            v: self.v * rhs.v,
            d,
        }
    }
}

impl std::ops::Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        let inv = 1.0 / rhs.v;
        let mut d = [0.0; 6];
        for i in 0..6 {
            d[i] = (self.d[i] - self.v * inv * rhs.d[i]) * inv;
        }
        Dual {
            v: self.v * inv,
            d,
        }
    }
}

impl std::ops::Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: self.d.map(|g| -g),
        }
    }
}

impl std::ops::Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, rhs: f64) -> Dual {
        Dual {
            v: self.v * rhs,
            d: self.d.map(|g| g * rhs),
        }
    }
}

impl std::ops::Add<f64> for Dual {
    type Output = Dual;
    fn add(self, rhs: f64) -> Dual {
        Dual {
            v: self.v + rhs,
            d: self.d,
        }
    }
}

type V3 = [Dual; 3];
type M3 = [[Dual; 3]; 3];

fn v3_con(x: f64, y: f64, z: f64) -> V3 {
    [Dual::con(x), Dual::con(y), Dual::con(z)]
}

fn dot(a: &V3, b: &V3) -> Dual {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &V3, b: &V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn v_sub(a: &V3, b: &V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn m_id() -> M3 {
    let z = Dual::con(0.0);
    let o = Dual::con(1.0);
    [[o, z, z], [z, o, z], [z, z, o]]
}

fn m_skew(w: &V3) -> M3 {
    let z = Dual::con(0.0);
    [
        [z, -w[2], w[1]],
        [w[2], z, -w[0]],
        [-w[1], w[0], z],
    ]
}

fn m_mul(a: &M3, b: &M3) -> M3 {
    let mut out = m_id();
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn m_vmul(a: &M3, v: &V3) -> V3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn m_t(a: &M3) -> M3 {
    let mut out = *a;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// `I + s1 K + s2 K^2` without forming intermediate matrices twice.
fn rodrigues_combo(k: &M3, s1: Dual, s2: Dual) -> M3 {
    let kk = m_mul(k, k);
    let mut out = m_id();
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = out[i][j] + k[i][j] * s1 + kk[i][j] * s2;
        }
    }
    out
}

/// `sin(theta)/theta` as a function of `theta^2`, branch thresholds equal
/// to the scalar path.
fn sinc_t2(t2: Dual) -> Dual {
    if t2.v < 1e-8 {
        Dual::con(1.0) - t2 * (1.0 / 6.0) + t2 * t2 * (1.0 / 120.0)
    } else {
        let th = t2.sqrt();
        th.sin() / th
    }
}

fn one_minus_cos_over_sq_t2(t2: Dual) -> Dual {
    if t2.v < 1e-4 {
        Dual::con(0.5) - t2 * (1.0 / 24.0) + t2 * t2 * (1.0 / 720.0)
    } else {
        let th = t2.sqrt();
        (Dual::con(1.0) - th.cos()) / t2
    }
}

fn theta_minus_sin_over_cube_t2(t2: Dual) -> Dual {
    if t2.v < 1e-4 {
        Dual::con(1.0 / 6.0) - t2 * (1.0 / 120.0) + t2 * t2 * (1.0 / 5040.0)
    } else {
        let th = t2.sqrt();
        (th - th.sin()) / (t2 * th)
    }
}

/// Quaternion components `(x, y, z, w)` of a rotation matrix, dominant
/// Shepperd branch, positive-w hemisphere. Branch selection uses values
/// only; each branch keeps its square root argument at or above one.
fn quat_from_rotation(r: &M3) -> [Dual; 4] {
    let t = r[0][0] + r[1][1] + r[2][2];
    let (x, y, z, w);
    if t.v >= r[0][0].v && t.v >= r[1][1].v && t.v >= r[2][2].v {
        w = (t + 1.0).sqrt() * 0.5;
        let s = Dual::con(0.25) / w;
        x = (r[1][2] - r[2][1]) * s;
        y = (r[2][0] - r[0][2]) * s;
        z = (r[0][1] - r[1][0]) * s;
    } else if r[0][0].v >= r[1][1].v && r[0][0].v >= r[2][2].v {
        x = (r[0][0] * 2.0 - t + 1.0).sqrt() * 0.5;
        let s = Dual::con(0.25) / x;
        y = (r[0][1] + r[1][0]) * s;
        z = (r[0][2] + r[2][0]) * s;
        w = (r[1][2] - r[2][1]) * s;
    } else if r[1][1].v >= r[2][2].v {
        y = (r[1][1] * 2.0 - t + 1.0).sqrt() * 0.5;
        let s = Dual::con(0.25) / y;
        x = (r[0][1] + r[1][0]) * s;
        z = (r[1][2] + r[2][1]) * s;
        w = (r[2][0] - r[0][2]) * s;
    } else {
        z = (r[2][2] * 2.0 - t + 1.0).sqrt() * 0.5;
        let s = Dual::con(0.25) / z;
        x = (r[0][2] + r[2][0]) * s;
        y = (r[1][2] + r[2][1]) * s;
        w = (r[0][1] - r[1][0]) * s;
    }
    let n = (x * x + y * y + z * z + w * w).sqrt();
    let sign = if w.v < 0.0 { -1.0 } else { 1.0 };
    let s = Dual::con(sign) / n;
    [x * s, y * s, z * s, w * s]
}

/// Rotation-vector logarithm from the quaternion. Below `|q_v| = 1e-5` the
/// closed form's `atan2(n, w)/n` is replaced by its series in `n^2`, which
/// needs no square root and keeps the derivative lanes exact at zero.
fn rot_log(r: &M3) -> V3 {
    let q = quat_from_rotation(r);
    let qv = [-q[0], -q[1], -q[2]];
    let s = qv[0] * qv[0] + qv[1] * qv[1] + qv[2] * qv[2];
    let w = q[3];
    if s.v < 1e-10 {
        let f = (Dual::con(2.0) / w) * (Dual::con(1.0) - s / (w * w * 3.0));
        [qv[0] * f, qv[1] * f, qv[2] * f]
    } else {
        let n = s.sqrt();
        let f = n.atan2(w) * 2.0 / n;
        [qv[0] * f, qv[1] * f, qv[2] * f]
    }
}

/// Squared geodesic distance between `exp(z)` and `gt`, with its gradient
/// in `z`. The value lane equals
/// `geodesic_dist_sq(&se3_exp(&Twist::from_vector(z)), gt, metric)` up to
/// rounding.
pub(crate) fn geodesic_sq_and_grad(
    z: &Vector6<f64>,
    gt: &Pose,
    metric: &MetricParam,
) -> (f64, Vector6<f64>) {
    let omega = [
        Dual::var(z[0], 0),
        Dual::var(z[1], 1),
        Dual::var(z[2], 2),
    ];
    let vel = [
        Dual::var(z[3], 3),
        Dual::var(z[4], 4),
        Dual::var(z[5], 5),
    ];

    // exp(z)
    let t2 = dot(&omega, &omega);
    let k = m_skew(&omega);
    let a = sinc_t2(t2);
    let b = one_minus_cos_over_sq_t2(t2);
    let c = theta_minus_sin_over_cube_t2(t2);
    let r = rodrigues_combo(&k, a, b);
    let vmat = rodrigues_combo(&k, b, c);
    let tr = m_vmul(&vmat, &vel);

    // exp(z)^-1 * gt
    let gt_r = [
        v3_con(gt.rotation[(0, 0)], gt.rotation[(0, 1)], gt.rotation[(0, 2)]),
        v3_con(gt.rotation[(1, 0)], gt.rotation[(1, 1)], gt.rotation[(1, 2)]),
        v3_con(gt.rotation[(2, 0)], gt.rotation[(2, 1)], gt.rotation[(2, 2)]),
    ];
    let gt_t = v3_con(gt.translation.x, gt.translation.y, gt.translation.z);
    let rt = m_t(&r);
    let rel_r = m_mul(&rt, &gt_r);
    let rel_t = m_vmul(&rt, &v_sub(&gt_t, &tr));

    // log of the relative element
    let w_rel = rot_log(&rel_r);
    let t2r = dot(&w_rel, &w_rel);
    let c2 = if t2r.v < 1e-2 {
        Dual::con(1.0 / 12.0) + t2r * (1.0 / 720.0) + t2r * t2r * (1.0 / 30240.0)
    } else {
        let th = t2r.sqrt();
        let a2 = th.sin() / th;
        let b2 = (Dual::con(1.0) - th.cos()) / t2r;
        (Dual::con(1.0) - a2 / (b2 * 2.0)) / t2r
    };
    let kr = m_skew(&w_rel);
    let krkr = m_mul(&kr, &kr);
    let mut vinv = m_id();
    for i in 0..3 {
        for j in 0..3 {
            vinv[i][j] = vinv[i][j] - kr[i][j] * 0.5 + krkr[i][j] * c2;
        }
    }
    let v_rel = m_vmul(&vinv, &rel_t);

    // |xi|^2 under the metric
    let av = metric.a();
    let a3 = v3_con(av.x, av.y, av.z);
    let d2 = dot(&w_rel, &w_rel) * 2.0 + dot(&w_rel, &cross(&a3, &v_rel))
        - dot(&v_rel, &cross(&a3, &w_rel))
        + dot(&v_rel, &v_rel);

    (d2.v, Vector6::from_row_slice(&d2.d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{geodesic_dist_sq, se3_exp, so3_exp, MetricParam, Twist};
    use nalgebra::{Vector3, Vector6};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_z(rng: &mut StdRng, rot_scale: f64, trans_scale: f64) -> Vector6<f64> {
        Vector6::new(
            (rng.gen::<f64>() - 0.5) * rot_scale,
            (rng.gen::<f64>() - 0.5) * rot_scale,
            (rng.gen::<f64>() - 0.5) * rot_scale,
            (rng.gen::<f64>() - 0.5) * trans_scale,
            (rng.gen::<f64>() - 0.5) * trans_scale,
            (rng.gen::<f64>() - 0.5) * trans_scale,
        )
    }

    fn random_pose(rng: &mut StdRng) -> Pose {
        let w = Vector3::new(
            (rng.gen::<f64>() - 0.5) * 2.0,
            (rng.gen::<f64>() - 0.5) * 2.0,
            (rng.gen::<f64>() - 0.5) * 2.0,
        );
        Pose::new(
            so3_exp(&w),
            Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ),
        )
    }

    #[test]
    fn value_lane_matches_scalar_path() {
        let mut rng = StdRng::seed_from_u64(11);
        let metric = MetricParam::new(Vector3::new(0.2, -0.1, 0.3)).unwrap();
        for _ in 0..500 {
            let z = random_z(&mut rng, 2.0, 1.0);
            let gt = random_pose(&mut rng);
            let (d2, _) = geodesic_sq_and_grad(&z, &gt, &metric);
            let expect = geodesic_dist_sq(&se3_exp(&Twist::from_vector(&z)), &gt, &metric);
            assert!(
                (d2 - expect).abs() <= 1e-12 * expect.max(1.0),
                "value mismatch: {d2} vs {expect}"
            );
        }
    }

    #[test]
    fn value_lane_matches_scalar_path_small_angles() {
        let metric = MetricParam::isotropic();
        for scale in [1e-12, 1e-8, 1e-6, 1e-3] {
            let z = Vector6::new(scale, -scale, scale * 0.5, 0.01, -0.02, 0.03);
            let gt = se3_exp(&Twist::new(
                Vector3::new(scale * 0.3, 0.0, -scale),
                Vector3::new(0.012, -0.018, 0.031),
            ));
            let (d2, _) = geodesic_sq_and_grad(&z, &gt, &metric);
            let expect = geodesic_dist_sq(&se3_exp(&Twist::from_vector(&z)), &gt, &metric);
            assert!(
                (d2 - expect).abs() <= 1e-12 * expect.max(1e-6),
                "scale {scale}: {d2} vs {expect}"
            );
        }
    }

    #[test]
    fn gradient_matches_central_difference() {
        let mut rng = StdRng::seed_from_u64(23);
        let metric = MetricParam::new(Vector3::new(-0.15, 0.25, 0.1)).unwrap();
        let h = 1e-6;
        for case in 0..40 {
            // Mix moderate and small-rotation operating points so both the
            // closed-form and series branches get exercised.
            let (rs, ts) = if case % 4 == 0 { (1e-4, 0.05) } else { (1.5, 0.8) };
            let z = random_z(&mut rng, rs, ts);
            let gt = random_pose(&mut rng);
            let (_, grad) = geodesic_sq_and_grad(&z, &gt, &metric);
            for i in 0..6 {
                let mut zp = z;
                let mut zm = z;
                zp[i] += h;
                zm[i] -= h;
                let fp = geodesic_dist_sq(&se3_exp(&Twist::from_vector(&zp)), &gt, &metric);
                let fm = geodesic_dist_sq(&se3_exp(&Twist::from_vector(&zm)), &gt, &metric);
                let fd = (fp - fm) / (2.0 * h);
                let denom = grad[i].abs().max(fd.abs()).max(1e-4);
                assert!(
                    (grad[i] - fd).abs() / denom < 1e-5,
                    "case {case} lane {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn gradient_zero_at_exact_match() {
        let metric = MetricParam::isotropic();
        let z = Vector6::new(0.3, -0.2, 0.1, 0.5, 0.0, -0.4);
        let gt = se3_exp(&Twist::from_vector(&z));
        let (d2, grad) = geodesic_sq_and_grad(&z, &gt, &metric);
        assert!(d2 < 1e-20);
        assert!(grad.norm() < 1e-9, "gradient at optimum: {grad}");
    }
}
