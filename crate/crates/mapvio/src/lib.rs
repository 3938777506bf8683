//! Map-aided visual-inertial odometry on synthetic desk-scale scenes.
//!
//! The crate couples a sliding-window visual-inertial filter with a prior
//! map of the environment. The map side renders predicted views, gates them
//! against the live camera by structural similarity, and feeds surviving
//! map-anchored features back into the filter as a second update stream. A
//! small pose-regression network, trained with a geodesic loss induced by a
//! left-invariant metric on SE(3), relocalizes the very first frame inside
//! the map.
//!
//! Module map:
//!
//! * [`se3`]: rotations, poses, exp/log, the metric family and geodesic loss.
//! * [`img`]: grayscale image plane and preprocessing.
//! * [`imu`]: inertial propagation and error-state Jacobians.
//! * [`msckf`]: stochastically cloned filter state and the two update paths.
//! * [`map`]: analytic prior-map renderer, SSIM gating, corner detection,
//!   render scheduling, and the map file format.
//! * [`init`]: pose-regression model, training, bootstrap, checkpoints.
//! * [`sim`]: analytic trajectory, inertial and camera measurement synthesis.
//! * [`harness`]: experiment configuration, the virtual-time event loop,
//!   trajectory metrics, and file I/O.
//!
//! Every randomized component takes an explicit seed; equal configuration
//! and seed reproduce output files byte for byte.
//!
//! Runnable walkthroughs live in `examples/` (`cargo run --example`, see the
//! README); the `mapvio` binary exposes the same flows as subcommands.

pub mod error;
pub mod harness;
pub mod img;
pub mod imu;
pub mod init;
pub mod map;
pub mod msckf;
pub mod se3;
pub mod sim;

pub use error::{Error, Result};
