//! Iterative photometric pose refinement against the map renderer: the
//! slow baseline the learned relocalizer is compared to.
//!
//! Gradient descent on the mean squared intensity difference between the
//! rendered map and a target image, with the gradient taken by central
//! finite differences over the six pose-twist directions and a
//! backtracking line search that only ever accepts loss reductions.

use nalgebra::Vector6;

use crate::img::ImagePlane;
use crate::map::{render, MapModel};
use crate::se3::{se3_exp, Pose, Twist};

/// Finite-difference step per twist component (radians, meters).
const FD_STEP: f64 = 1e-3;
/// Initial line-search step along the unit descent direction.
const STEP0: f64 = 0.05;
const STEP_SHRINK: f64 = 0.5;
const MIN_STEP: f64 = 1e-5;
/// Gradient norms below this mean a flat landscape; descent stops.
const GRAD_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct RefineResult {
    /// Refined world-to-camera pose.
    pub pose: Pose,
    pub loss: f64,
    pub initial_loss: f64,
    /// Accepted descent steps; zero means the guess was already a local
    /// minimum at this resolution.
    pub accepted_steps: usize,
    /// Loss after every accepted step, non-increasing by construction.
    pub loss_trace: Vec<f64>,
    /// True when iteration stopped because no improving step existed,
    /// false when the iteration budget ran out first.
    pub stalled: bool,
}

fn photometric_loss(map: &MapModel, target: &ImagePlane, pose: &Pose) -> f64 {
    render(map, pose).image.mean_sq_diff(target)
}

/// Refines `guess` toward the pose whose render matches `target`.
///
/// Each iteration costs twelve renders for the gradient plus up to a
/// handful for the line search, which is what makes this baseline orders
/// of magnitude slower than a single network forward pass.
pub fn refine_pose_photometric(
    map: &MapModel,
    target: &ImagePlane,
    guess: &Pose,
    max_iters: usize,
) -> RefineResult {
    let mut pose = *guess;
    let mut loss = photometric_loss(map, target, &pose);
    let initial_loss = loss;
    let mut trace = vec![loss];
    let mut accepted = 0usize;
    let mut stalled = false;

    for _ in 0..max_iters {
        // Central differences in the right tangent space at the current pose.
        let mut grad = Vector6::<f64>::zeros();
        for i in 0..6 {
            let mut d = Vector6::<f64>::zeros();
            d[i] = FD_STEP;
            let plus = pose.compose(&se3_exp(&Twist::from_vector(&d)));
            d[i] = -FD_STEP;
            let minus = pose.compose(&se3_exp(&Twist::from_vector(&d)));
            grad[i] = (photometric_loss(map, target, &plus)
                - photometric_loss(map, target, &minus))
                / (2.0 * FD_STEP);
        }
        let g_norm = grad.norm();
        if g_norm < GRAD_FLOOR {
            stalled = true;
            break;
        }
        let dir = -grad / g_norm;

        let mut step = STEP0;
        let mut improved = false;
        while step >= MIN_STEP {
            let candidate = pose.compose(&se3_exp(&Twist::from_vector(&(dir * step))));
            let candidate_loss = photometric_loss(map, target, &candidate);
            if candidate_loss < loss {
                pose = candidate;
                loss = candidate_loss;
                trace.push(loss);
                accepted += 1;
                improved = true;
                break;
            }
            step *= STEP_SHRINK;
        }
        if !improved {
            stalled = true;
            break;
        }
    }

    RefineResult {
        pose,
        loss,
        initial_loss,
        accepted_steps: accepted,
        loss_trace: trace,
        stalled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{se3_log, so3_exp};
    use crate::sim::{desk_scene, default_extrinsics, generate_truth, TrajectorySpec};
    use nalgebra::Vector3;

    fn scene_and_pose() -> (MapModel, Pose) {
        let map = desk_scene(1);
        let gt = generate_truth(&TrajectorySpec::default(), &default_extrinsics(), 200.0)
            .unwrap();
        (map, gt.truth_at(4.0).camera_pose())
    }

    #[test]
    fn exact_guess_accepts_no_steps() {
        let (map, pose) = scene_and_pose();
        let target = render(&map, &pose).image;
        let result = refine_pose_photometric(&map, &target, &pose, 10);
        assert_eq!(result.accepted_steps, 0);
        assert!(result.loss < 1e-15);
        assert!(result.stalled);
    }

    #[test]
    fn loss_trace_is_monotone_and_small_errors_shrink() {
        let (map, pose) = scene_and_pose();
        let target = render(&map, &pose).image;
        // A couple of degrees and centimeters off, the designed use case.
        let delta = Twist::new(
            Vector3::new(0.02, -0.015, 0.01),
            Vector3::new(0.02, 0.01, -0.02),
        );
        let guess = pose.compose(&se3_exp(&delta));
        let result = refine_pose_photometric(&map, &target, &guess, 40);
        for w in result.loss_trace.windows(2) {
            assert!(w[1] <= w[0], "loss increased: {} -> {}", w[0], w[1]);
        }
        assert!(result.accepted_steps > 0);
        assert!(
            result.loss < 0.25 * result.initial_loss,
            "loss {} from {}",
            result.loss,
            result.initial_loss
        );
        let err = se3_log(&result.pose.inverse().compose(&pose)).as_vector();
        let guess_err = se3_log(&guess.inverse().compose(&pose)).as_vector();
        assert!(err.norm() < guess_err.norm());
    }

    #[test]
    fn rotation_only_offset_recovers_orientation() {
        let (map, pose) = scene_and_pose();
        let target = render(&map, &pose).image;
        let guess = Pose::new(
            so3_exp(&Vector3::new(0.0, 0.0, 0.025)) * pose.rotation,
            pose.translation,
        );
        let result = refine_pose_photometric(&map, &target, &guess, 60);
        let before = se3_log(&guess.inverse().compose(&pose)).omega.norm();
        let after = se3_log(&result.pose.inverse().compose(&pose)).omega.norm();
        assert!(
            after < 0.5 * before,
            "rotation error {after} rad from {before} rad"
        );
    }
}
