//! Relocalization model lifecycle: synthetic dataset generation over a
//! pose region, training, and held-out evaluation with latency
//! measurement.
//!
//! The regression target is the full map-to-camera pose as a twist. The
//! sampled region is an arc of the standard orbit chosen so the rotation
//! stays well away from the logarithm's antipode; the live trajectory
//! starts in the middle of it.

use std::time::Instant;

use nalgebra::{DVector, Matrix6, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::img::ImagePlane;
use crate::init::{
    estimate_sigma_init, flatten_input, input_side, relocalize, train, validation_errors,
    MlpModel, TrainOptions,
};
use crate::map::{render, MapModel};
use crate::se3::{se3_exp, so3_exp, so3_log, MetricParam, Pose, Twist};
use crate::sim::look_at_center;

/// Pose distribution the relocalizer is trained and evaluated on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionSpec {
    /// Orbit angle interval, radians.
    pub theta: (f64, f64),
    /// Orbit radius interval, meters.
    pub radius: (f64, f64),
    /// Camera height interval, meters.
    pub height: (f64, f64),
    /// Per-axis attitude jitter applied on top of the look-at pose, radians.
    pub attitude_jitter: f64,
}

impl Default for RegionSpec {
    fn default() -> Self {
        RegionSpec {
            theta: (-0.85, 0.85),
            radius: (0.65, 0.95),
            height: (0.35, 0.65),
            attitude_jitter: 0.01,
        }
    }
}

/// One labeled example: the image a camera at `pose` would capture.
#[derive(Debug, Clone)]
pub struct RelocSample {
    pub image: ImagePlane,
    /// Map-to-camera pose.
    pub pose: Pose,
}

/// Draws world-to-camera poses uniformly over the region.
pub fn sample_region_poses(region: &RegionSpec, n: usize, seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let theta = rng.gen_range(region.theta.0..=region.theta.1);
            let r = rng.gen_range(region.radius.0..=region.radius.1);
            let h = rng.gen_range(region.height.0..=region.height.1);
            let position = Vector3::new(r * theta.cos(), r * theta.sin(), h);
            let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
            let jitter = Vector3::new(
                region.attitude_jitter * gauss(),
                region.attitude_jitter * gauss(),
                region.attitude_jitter * gauss(),
            );
            let rotation = so3_exp(&jitter) * look_at_center(&position);
            Pose::new(rotation, -(rotation * position))
        })
        .collect()
}

/// Renders the map at each pose into a labeled sample.
pub fn render_dataset(map: &MapModel, poses: &[Pose]) -> Vec<RelocSample> {
    poses
        .iter()
        .map(|pose| RelocSample {
            image: render(map, pose).image,
            pose: *pose,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainInitOptions {
    /// Layer widths, input first, 6 last.
    pub arch: Vec<usize>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub metric_a: Vector3<f64>,
    /// Diagonal floor for the anchor covariance estimate.
    pub sigma_floor: f64,
    pub seed: u64,
}

impl Default for TrainInitOptions {
    fn default() -> Self {
        TrainInitOptions {
            arch: vec![576, 256, 128, 6],
            train_samples: 3200,
            val_samples: 128,
            epochs: 90,
            batch_size: 32,
            learning_rate: 5e-3,
            lr_decay: 0.99,
            momentum: 0.9,
            metric_a: Vector3::zeros(),
            sigma_floor: 1e-8,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainInitReport {
    pub epoch_losses: Vec<f64>,
    pub val_rot_median_deg: f64,
    pub val_pos_median_cm: f64,
    /// Anchor covariance from held-out prediction errors.
    pub sigma_init: Matrix6<f64>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Trains a relocalizer on renders of `map` over `region`.
pub fn train_init(
    map: &MapModel,
    region: &RegionSpec,
    opts: &TrainInitOptions,
) -> Result<(MlpModel, TrainInitReport)> {
    let metric = MetricParam::new(opts.metric_a)?;
    let mut model = MlpModel::new(&opts.arch, metric, opts.seed)?;
    let side = input_side(&model)?;

    let train_poses = sample_region_poses(region, opts.train_samples, opts.seed);
    let inputs: Vec<DVector<f64>> = train_poses
        .iter()
        .map(|pose| flatten_input(&render(map, pose).image, side))
        .collect();
    model.center_output_bias(&train_poses)?;
    let topts = TrainOptions {
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        learning_rate: opts.learning_rate,
        lr_decay: opts.lr_decay,
        momentum: opts.momentum,
        seed: opts.seed.wrapping_add(1),
    };
    let report = train(&mut model, &inputs, &train_poses, &topts)?;

    let (val_errors, rot_deg, pos_cm) =
        validation_metrics(&model, map, region, opts.val_samples, opts.seed.wrapping_add(2))?;
    let sigma_init = estimate_sigma_init(&val_errors, opts.sigma_floor)?;
    let mut rot = rot_deg;
    let mut pos = pos_cm;
    Ok((
        model,
        TrainInitReport {
            epoch_losses: report.epoch_losses,
            val_rot_median_deg: median(&mut rot),
            val_pos_median_cm: median(&mut pos),
            sigma_init,
        },
    ))
}

/// Held-out prediction errors: the raw twists (for covariance estimation)
/// plus per-sample rotation and camera-center errors.
pub fn validation_metrics(
    model: &MlpModel,
    map: &MapModel,
    region: &RegionSpec,
    samples: usize,
    seed: u64,
) -> Result<(Vec<Twist>, Vec<f64>, Vec<f64>)> {
    let side = input_side(model)?;
    let poses = sample_region_poses(region, samples, seed);
    let inputs: Vec<DVector<f64>> = poses
        .iter()
        .map(|pose| flatten_input(&render(map, pose).image, side))
        .collect();
    let errors = validation_errors(model, &inputs, &poses)?;
    let mut rot_deg = Vec::with_capacity(poses.len());
    let mut pos_cm = Vec::with_capacity(poses.len());
    for (input, pose) in inputs.iter().zip(&poses) {
        let pred = se3_exp(&Twist::from_vector(&model.forward(input)));
        rot_deg.push(rotation_error_deg(&pred, pose));
        pos_cm.push(camera_center_error_cm(&pred, pose));
    }
    Ok((errors, rot_deg, pos_cm))
}

/// Geodesic angle between two attitudes, degrees.
pub fn rotation_error_deg(a: &Pose, b: &Pose) -> f64 {
    so3_log(&(a.rotation * b.rotation.transpose()))
        .norm()
        .to_degrees()
}

/// Distance between camera centers, centimeters.
pub fn camera_center_error_cm(a: &Pose, b: &Pose) -> f64 {
    let ca = -(a.rotation.transpose() * a.translation);
    let cb = -(b.rotation.transpose() * b.translation);
    (ca - cb).norm() * 100.0
}

/// One evaluated inference.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct InitEval {
    pub rot_deg: f64,
    pub pos_cm: f64,
    /// Wall-clock seconds around the forward pass alone.
    pub seconds: f64,
}

/// Runs the preloaded model on each sample, timing only the inference.
pub fn eval_init(model: &MlpModel, samples: &[RelocSample]) -> Result<Vec<InitEval>> {
    let mut evals = Vec::with_capacity(samples.len());
    for s in samples {
        let started = Instant::now();
        let (pred, _) = relocalize(model, &s.image)?;
        let seconds = started.elapsed().as_secs_f64();
        evals.push(InitEval {
            rot_deg: rotation_error_deg(&pred, &s.pose),
            pos_cm: camera_center_error_cm(&pred, &s.pose),
            seconds,
        });
    }
    Ok(evals)
}
