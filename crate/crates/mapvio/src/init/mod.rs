//! Relocalization of the first camera frame inside the prior map.
//!
//! A trained [`MlpModel`] regresses the map-to-camera pose of the very
//! first image; composing with the camera-IMU extrinsics gives the first
//! IMU pose in the map frame, and the spread of the model's validation
//! errors becomes the initialization covariance the filter carries into
//! its map-anchored updates.

mod checkpoint;
mod dual;
mod mlp;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use mlp::{
    default_architecture, loss_and_grad, train, Activation, Gradients, Layer, MlpModel,
    TrainOptions, TrainReport,
};

use nalgebra::{DVector, Matrix6, Vector6};

use crate::error::{Error, Result};
use crate::img::ImagePlane;
use crate::se3::{se3_exp, se3_log, Pose, Twist};

/// Network input from a camera image: area-averaged to `side x side`,
/// flattened row-major, and centered to `[-0.5, 0.5]`. Training data and
/// inference must both come through here.
pub fn flatten_input(image: &ImagePlane, side: usize) -> DVector<f64> {
    let small = image.resize_area(side, side);
    DVector::from_iterator(side * side, small.as_slice().iter().map(|v| v - 0.5))
}

/// Side length of the square input the model expects.
pub fn input_side(model: &MlpModel) -> Result<usize> {
    let d = model.input_dim();
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        return Err(Error::InvalidArgument(format!(
            "model input width {d} is not a square image"
        )));
    }
    Ok(side)
}

/// Predicts the map-to-camera pose of an image. Returns the pose together
/// with the raw network output.
pub fn relocalize(model: &MlpModel, image: &ImagePlane) -> Result<(Pose, Vector6<f64>)> {
    let side = input_side(model)?;
    let z = model.forward(&flatten_input(image, side));
    Ok((se3_exp(&Twist::from_vector(&z)), z))
}

/// First IMU pose in the map frame: the relocalized map-to-camera map
/// followed by the fixed camera-to-IMU extrinsics.
pub fn compose_first_imu(map_to_camera: &Pose, camera_to_imu: &Pose) -> Pose {
    camera_to_imu.compose(map_to_camera)
}

/// Right-tangent prediction errors `log(pred^-1 true)` over a validation
/// set; the same convention the filter uses for its map-transform
/// uncertainty.
pub fn validation_errors(
    model: &MlpModel,
    inputs: &[DVector<f64>],
    targets: &[Pose],
) -> Result<Vec<Twist>> {
    if inputs.len() != targets.len() {
        return Err(Error::InvalidArgument(
            "validation inputs and targets differ in length".into(),
        ));
    }
    Ok(inputs
        .iter()
        .zip(targets)
        .map(|(x, gt)| {
            let pred = se3_exp(&Twist::from_vector(&model.forward(x)));
            se3_log(&pred.inverse().compose(gt))
        })
        .collect())
}

/// Second moment of the error twists plus a diagonal floor: the
/// initialization covariance fed to map-anchored updates. Taken about zero
/// rather than the sample mean, so a biased predictor honestly widens the
/// covariance.
pub fn estimate_sigma_init(errors: &[Twist], floor: f64) -> Result<Matrix6<f64>> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("no validation errors".into()));
    }
    if floor < 0.0 {
        return Err(Error::InvalidArgument("negative variance floor".into()));
    }
    let mut sigma = Matrix6::<f64>::zeros();
    for e in errors {
        let v = e.as_vector();
        sigma += v * v.transpose();
    }
    sigma /= errors.len() as f64;
    sigma += Matrix6::identity() * floor;
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{so3_exp, MetricParam};
    use nalgebra::Vector3;

    #[test]
    fn relocalize_runs_on_square_input_model() {
        let model = MlpModel::new(&[16, 8, 6], MetricParam::isotropic(), 3).unwrap();
        let image = ImagePlane::from_vec(32, 32, vec![0.25; 1024]).unwrap();
        let (pose, z) = relocalize(&model, &image).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
        assert!(pose.orthonormality_defect() < 1e-12);
        // Constant input, zero bias: z is exactly the bias image of the
        // constant, and the pose reflects it.
        let expect = se3_exp(&Twist::from_vector(&z));
        assert_eq!(pose.rotation, expect.rotation);
    }

    #[test]
    fn relocalize_rejects_non_square_input_width() {
        let model = MlpModel::new(&[15, 8, 6], MetricParam::isotropic(), 3).unwrap();
        let image = ImagePlane::new(8, 8);
        assert!(relocalize(&model, &image).is_err());
    }

    #[test]
    fn flatten_input_centers_and_orders() {
        let mut img = ImagePlane::new(4, 4);
        img.set(0, 0, 1.0);
        let x = flatten_input(&img, 2);
        // Top-left 2x2 block of the source averages into element 0.
        assert!((x[0] - (0.25 - 0.5)).abs() < 1e-15);
        assert!((x[1] - (-0.5)).abs() < 1e-15);
        assert_eq!(x.len(), 4);
    }

    #[test]
    fn compose_first_imu_maps_points_through_both() {
        let t_w_c = Pose::new(
            so3_exp(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)),
            Vector3::new(0.1, -0.2, 0.3),
        );
        let t_c_i = Pose::new(
            so3_exp(&Vector3::new(0.1, 0.2, -0.3)),
            Vector3::new(0.01, 0.02, 0.03),
        );
        let t_w_i = compose_first_imu(&t_w_c, &t_c_i);
        let p_w = Vector3::new(0.5, -0.4, 1.2);
        let expect = t_c_i.transform_point(&t_w_c.transform_point(&p_w));
        assert!((t_w_i.transform_point(&p_w) - expect).norm() < 1e-14);
    }

    #[test]
    fn sigma_init_matches_known_spread() {
        // Errors alternate +/- e per axis: the second moment is exactly
        // diag(e_i^2).
        let mut errors = Vec::new();
        let amp = [0.01, 0.02, 0.03, 0.1, 0.2, 0.3];
        for sign in [1.0f64, -1.0] {
            let v = Vector6::from_row_slice(&amp) * sign;
            errors.push(Twist::from_vector(&v));
        }
        let sigma = estimate_sigma_init(&errors, 1e-8).unwrap();
        for i in 0..6 {
            let expect = amp[i] * amp[i] + 1e-8;
            assert!((sigma[(i, i)] - expect).abs() < 1e-15);
        }
        // Cross terms survive: these errors are perfectly correlated.
        assert!((sigma[(0, 3)] - 0.01 * 0.1).abs() < 1e-15);
        assert!(estimate_sigma_init(&[], 0.0).is_err());
    }
}
