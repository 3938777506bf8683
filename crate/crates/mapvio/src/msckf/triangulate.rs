//! Multi-view point triangulation.
//!
//! A linear homogeneous solve seeds a Gauss-Newton refinement of the
//! reprojection error in normalized image coordinates. Callers supply one
//! world-to-camera map per observation.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::se3::Pose;

/// Minimum stereo baseline between the closest and farthest camera
/// centers, in meters.
const MIN_BASELINE: f64 = 0.01;

/// Depth floor: points this close to a camera plane count as behind it.
const MIN_DEPTH: f64 = 1e-6;

const MAX_ITERS: usize = 20;
const STEP_TOL: f64 = 1e-12;

/// Triangulates one point from `obs`, a set of (world-to-camera pose,
/// normalized image point) pairs, returning the point in world coordinates.
///
/// Fails with [`Error::InvalidArgument`] on fewer than two views,
/// [`Error::IllConditioned`] when the views have no usable baseline or the
/// solve degenerates, and [`Error::BehindCamera`] when the refined point
/// falls behind any view.
pub fn triangulate(obs: &[(Pose, Vector2<f64>)]) -> Result<Vector3<f64>> {
    if obs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "triangulation needs at least two views, got {}",
            obs.len()
        )));
    }
    let centers: Vec<Vector3<f64>> = obs
        .iter()
        .map(|(pose, _)| {
            let inv = pose.inverse();
            inv.transform_point(&Vector3::zeros())
        })
        .collect();
    let mut baseline = 0.0f64;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            baseline = baseline.max((centers[i] - centers[j]).norm());
        }
    }
    if baseline < MIN_BASELINE {
        return Err(Error::IllConditioned {
            reason: format!("baseline {baseline:.4} m below {MIN_BASELINE}"),
        });
    }

    let mut point = linear_seed(obs)?;
    let mut cost = reprojection_cost(obs, &point)?;

    for iter in 0..MAX_ITERS {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for (pose, z) in obs {
            let pc = pose.transform_point(&point);
            let (u, v, w) = (pc.x, pc.y, pc.z);
            let proj = Vector2::new(u / w, v / w);
            let r = proj - z;
            let jp = nalgebra::Matrix2x3::new(
                1.0 / w,
                0.0,
                -u / (w * w),
                0.0,
                1.0 / w,
                -v / (w * w),
            );
            let j = jp * pose.rotation;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let step = match jtj.cholesky() {
            Some(ch) => ch.solve(&jtr),
            None => {
                return Err(Error::IllConditioned {
                    reason: "normal equations not positive definite".into(),
                })
            }
        };
        let candidate = point - step;
        let new_cost = reprojection_cost(obs, &candidate)?;
        if !new_cost.is_finite() || new_cost > 10.0 * cost + 1e-9 {
            return Err(Error::Divergence { iterations: iter + 1 });
        }
        point = candidate;
        cost = new_cost;
        if step.norm() < STEP_TOL {
            break;
        }
    }

    for (pose, _) in obs {
        let z = pose.transform_point(&point).z;
        if z <= MIN_DEPTH {
            return Err(Error::BehindCamera { z });
        }
    }
    Ok(point)
}

/// Homogeneous linear estimate: each view contributes the two cross-product
/// rows of `[R | t]` against the observed ray.
fn linear_seed(obs: &[(Pose, Vector2<f64>)]) -> Result<Vector3<f64>> {
    let mut a = DMatrix::<f64>::zeros(2 * obs.len(), 4);
    for (k, (pose, z)) in obs.iter().enumerate() {
        let p = pose.to_homogeneous();
        for c in 0..4 {
            a[(2 * k, c)] = z.x * p[(2, c)] - p[(0, c)];
            a[(2 * k + 1, c)] = z.y * p[(2, c)] - p[(1, c)];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::IllConditioned {
        reason: "linear seed SVD did not converge".into(),
    })?;
    let h: Vector4<f64> = vt
        .row(vt.nrows() - 1)
        .transpose()
        .into_owned()
        .fixed_rows::<4>(0)
        .into();
    if h.w.abs() < 1e-12 {
        return Err(Error::IllConditioned {
            reason: "linear seed lies at infinity".into(),
        });
    }
    Ok(Vector3::new(h.x / h.w, h.y / h.w, h.z / h.w))
}

/// Total squared reprojection error; fails if the point is behind any view.
fn reprojection_cost(obs: &[(Pose, Vector2<f64>)], point: &Vector3<f64>) -> Result<f64> {
    let mut cost = 0.0;
    for (pose, z) in obs {
        let pc = pose.transform_point(point);
        if pc.z <= MIN_DEPTH {
            return Err(Error::BehindCamera { z: pc.z });
        }
        let proj = Vector2::new(pc.x / pc.z, pc.y / pc.z);
        cost += (proj - z).norm_squared();
    }
    Ok(cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::so3_exp;
    use nalgebra::Vector3;

    /// World-to-camera pose looking from `center` at `target`, with a
    /// roughly-down image y axis.
    fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> Pose {
        let fwd = (target - center).normalize();
        let mut up_hint = Vector3::new(0.0, 0.0, 1.0);
        if fwd.cross(&up_hint).norm() < 1e-6 {
            up_hint = Vector3::new(0.0, 1.0, 0.0);
        }
        let right = fwd.cross(&up_hint).normalize();
        let down = fwd.cross(&right).normalize();
        let r_ctow = nalgebra::Matrix3::from_columns(&[right, down, fwd]);
        let r = r_ctow.transpose();
        Pose::new(r, -(r * center))
    }

    fn observe(pose: &Pose, point: &Vector3<f64>) -> Vector2<f64> {
        let pc = pose.transform_point(point);
        Vector2::new(pc.x / pc.z, pc.y / pc.z)
    }

    #[test]
    fn recovers_point_from_exact_views() {
        let target = Vector3::new(0.3, -0.2, 0.9);
        let mut obs = Vec::new();
        for k in 0..4 {
            let ang = 0.4 * k as f64;
            let center = Vector3::new(2.0 * ang.cos(), 2.0 * ang.sin(), 1.2);
            let pose = look_at(center, Vector3::new(0.0, 0.0, 1.0));
            obs.push((pose, observe(&pose, &target)));
        }
        let est = triangulate(&obs).unwrap();
        assert!(
            (est - target).norm() < 1e-9,
            "triangulation off by {}",
            (est - target).norm()
        );
    }

    #[test]
    fn noisy_views_stay_within_centimeters() {
        let target = Vector3::new(-0.1, 0.4, 0.6);
        let mut obs = Vec::new();
        // Deterministic low-amplitude perturbation on each coordinate.
        let noise = [3e-4, -2e-4, 1e-4, -3e-4, 2e-4, -1e-4, 2.5e-4, -1.5e-4];
        for k in 0..4 {
            let ang = 0.5 * k as f64 + 0.2;
            let center = Vector3::new(1.5 * ang.cos(), 1.5 * ang.sin(), 1.0);
            let pose = look_at(center, Vector3::zeros());
            let mut z = observe(&pose, &target);
            z.x += noise[2 * k];
            z.y += noise[2 * k + 1];
            obs.push((pose, z));
        }
        let est = triangulate(&obs).unwrap();
        assert!(
            (est - target).norm() < 0.02,
            "noisy triangulation off by {}",
            (est - target).norm()
        );
    }

    #[test]
    fn refinement_beats_linear_seed_under_noise() {
        let target = Vector3::new(0.2, 0.1, 0.5);
        let mut obs = Vec::new();
        let noise = [4e-4, -4e-4, 3e-4, -3e-4, 2e-4, -2e-4];
        for k in 0..3 {
            let center = Vector3::new(-1.0 + k as f64, -2.0, 0.8);
            let pose = look_at(center, Vector3::zeros());
            let mut z = observe(&pose, &target);
            z.x += noise[2 * k];
            z.y += noise[2 * k + 1];
            obs.push((pose, z));
        }
        let seed = linear_seed(&obs).unwrap();
        let refined = triangulate(&obs).unwrap();
        let seed_cost = reprojection_cost(&obs, &seed).unwrap();
        let refined_cost = reprojection_cost(&obs, &refined).unwrap();
        assert!(refined_cost <= seed_cost + 1e-15);
    }

    #[test]
    fn rejects_single_view() {
        let pose = look_at(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros());
        let z = observe(&pose, &Vector3::new(0.0, 0.0, 0.2));
        assert!(matches!(
            triangulate(&[(pose, z)]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn rejects_zero_baseline() {
        let pose = look_at(Vector3::new(1.5, 0.2, 0.3), Vector3::zeros());
        let z = observe(&pose, &Vector3::new(0.0, 0.0, 0.1));
        let obs = vec![(pose, z), (pose, z)];
        assert!(matches!(
            triangulate(&obs),
            Err(Error::IllConditioned { .. })
        ));
    }

    #[test]
    fn rejects_point_behind_cameras() {
        // Two parallel cameras whose observed rays diverge in front and
        // meet only at negative depth.
        let r = so3_exp(&Vector3::new(0.0, 0.0, 0.0));
        let pose_a = Pose::new(r, Vector3::zeros());
        let pose_b = Pose::new(r, Vector3::new(-0.5, 0.0, 0.0));
        let obs = vec![
            (pose_a, Vector2::new(-0.3, 0.0)),
            (pose_b, Vector2::new(0.3, 0.0)),
        ];
        match triangulate(&obs) {
            Err(Error::BehindCamera { .. })
            | Err(Error::IllConditioned { .. })
            | Err(Error::Divergence { .. }) => {}
            other => panic!("expected a geometric failure, got {other:?}"),
        }
    }
}
