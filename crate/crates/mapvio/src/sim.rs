//! Deterministic synthetic data generation.
//!
//! A camera orbits a desk-scale scene while looking at its center. The
//! trajectory is analytic and twice differentiable, so inertial
//! measurements come from exact kinematics rather than numerical
//! differentiation: every scalar is evaluated as a second-order jet
//! `(value, d/dt, d2/dt2)` and the IMU quantities fall out of the
//! derivative lanes, lever arm included.
//!
//! The world frame is gravity aligned with z up. The orbit starts with a
//! stationary prelude (for estimator bootstrapping) and spins up through a
//! quintic ramp, keeping angular acceleration finite everywhere.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imu::{ImuSample, NoiseParams, GRAVITY};
use crate::map::{BackgroundModel, CameraIntrinsics, Landmark, LandmarkChange, MapModel};
use crate::msckf::Extrinsics;

/// Captured-camera visibility floor: landmarks closer than this to the
/// image plane are not observed.
pub const CAPTURE_MIN_DEPTH: f64 = 0.1;

/// Orbit trajectory around the scene center.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    /// Orbit radius in the xy plane, meters.
    pub radius: f64,
    /// Mean camera height, meters.
    pub height: f64,
    /// Orbit rate after spin-up, rad/s.
    pub angular_rate: f64,
    /// Amplitude of the vertical bob, meters.
    pub bob_amplitude: f64,
    /// Vertical bob cycles per radian of orbit angle.
    pub bob_cycles: f64,
    /// Total duration, seconds.
    pub duration: f64,
    /// Stationary hold before any motion, seconds.
    pub prelude: f64,
    /// Spin-up time from rest to the full angular rate, seconds.
    pub ramp: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            radius: 0.8,
            height: 0.5,
            angular_rate: 0.6,
            bob_amplitude: 0.04,
            bob_cycles: 3.0,
            duration: 30.0,
            prelude: 0.3,
            ramp: 0.7,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.radius <= 0.0 {
            return Err(Error::InvalidArgument("orbit radius must be positive".into()));
        }
        if self.duration <= 0.0 {
            return Err(Error::InvalidArgument("duration must be positive".into()));
        }
        if self.prelude < 0.0 || self.ramp <= 0.0 {
            return Err(Error::InvalidArgument(
                "prelude must be non-negative and ramp positive".into(),
            ));
        }
        Ok(())
    }
}

/// True kinematic state at one instant, world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub ts: f64,
    /// World-to-IMU rotation.
    pub r_wtoi: Matrix3<f64>,
    /// IMU position, velocity, acceleration in the world frame.
    pub p_i: Vector3<f64>,
    pub v_i: Vector3<f64>,
    pub a_i: Vector3<f64>,
    /// Body angular rate in the IMU frame.
    pub omega: Vector3<f64>,
    /// World-to-camera rotation and camera center.
    pub r_wtoc: Matrix3<f64>,
    pub p_c: Vector3<f64>,
}

impl TruthSample {
    /// World-to-camera map of this sample.
    pub fn camera_pose(&self) -> crate::se3::Pose {
        crate::se3::Pose::new(self.r_wtoc, -(self.r_wtoc * self.p_c))
    }
}

/// Analytic trajectory truth plus a pre-sampled grid at the IMU rate.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub spec: TrajectorySpec,
    pub extrinsics: Extrinsics,
    pub imu_rate: f64,
    pub samples: Vec<TruthSample>,
}

impl GroundTruth {
    /// Exact truth at an arbitrary time, evaluated analytically.
    pub fn truth_at(&self, t: f64) -> TruthSample {
        kinematics(&self.spec, &self.extrinsics, t)
    }
}

/// Samples the analytic trajectory at `imu_rate` over the spec duration.
pub fn generate_truth(
    spec: &TrajectorySpec,
    extrinsics: &Extrinsics,
    imu_rate: f64,
) -> Result<GroundTruth> {
    spec.validate()?;
    if imu_rate <= 0.0 {
        return Err(Error::InvalidArgument("IMU rate must be positive".into()));
    }
    let n = (spec.duration * imu_rate).floor() as usize;
    let samples = (0..=n)
        .map(|k| kinematics(spec, extrinsics, k as f64 / imu_rate))
        .collect();
    Ok(GroundTruth {
        spec: *spec,
        extrinsics: *extrinsics,
        imu_rate,
        samples,
    })
}

/// IMU measurement stream with the true bias trajectories that produced it.
#[derive(Debug, Clone)]
pub struct ImuSynthesis {
    pub samples: Vec<ImuSample>,
    /// True `(gyro bias, accel bias)` at each sample time.
    pub biases: Vec<(Vector3<f64>, Vector3<f64>)>,
}

/// Corrupts the true kinematics into IMU measurements: white noise at the
/// configured densities plus random-walk biases starting from `(bg0, ba0)`.
///
/// Per sample the generator draws, in fixed order, three gyro noises,
/// three accelerometer noises, three gyro-walk steps, and three
/// accelerometer-walk steps, which makes the stream bitwise reproducible
/// per seed.
pub fn synthesize_imu(
    gt: &GroundTruth,
    noise: &NoiseParams,
    bg0: Vector3<f64>,
    ba0: Vector3<f64>,
    seed: u64,
) -> ImuSynthesis {
    let dt = 1.0 / gt.imu_rate;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    // White noise applied over one interval has std sigma / sqrt(dt);
    // the walk accumulates sigma_w * sqrt(dt) per interval.
    let wg = noise.sigma_g / dt.sqrt();
    let wa = noise.sigma_a / dt.sqrt();
    let sg = noise.sigma_wg * dt.sqrt();
    let sa = noise.sigma_wa * dt.sqrt();

    let mut bg = bg0;
    let mut ba = ba0;
    let mut samples = Vec::with_capacity(gt.samples.len());
    let mut biases = Vec::with_capacity(gt.samples.len());
    for truth in &gt.samples {
        biases.push((bg, ba));
        let mut gyro = truth.omega + bg;
        let mut accel = truth.r_wtoi * (truth.a_i - GRAVITY) + ba;
        for i in 0..3 {
            gyro[i] += wg * unit.sample(&mut rng);
        }
        for i in 0..3 {
            accel[i] += wa * unit.sample(&mut rng);
        }
        for i in 0..3 {
            bg[i] += sg * unit.sample(&mut rng);
        }
        for i in 0..3 {
            ba[i] += sa * unit.sample(&mut rng);
        }
        samples.push(ImuSample {
            ts: truth.ts,
            gyro,
            accel,
        });
    }
    ImuSynthesis { samples, biases }
}

/// Observations of one camera frame: `(landmark id, u, v)` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub ts: f64,
    pub observations: Vec<(u32, f64, f64)>,
}

/// Projects the map's landmarks through the true camera poses at
/// `rate_hz`, adding Gaussian pixel noise. A landmark is observed when its
/// true projection lands in the frame and its depth exceeds
/// [`CAPTURE_MIN_DEPTH`].
pub fn synthesize_camera(
    gt: &GroundTruth,
    map: &MapModel,
    rate_hz: f64,
    sigma_px: f64,
    seed: u64,
) -> Result<Vec<CameraFrame>> {
    if rate_hz <= 0.0 {
        return Err(Error::InvalidArgument("camera rate must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let n = (gt.spec.duration * rate_hz).floor() as usize;
    let mut frames = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let ts = k as f64 / rate_hz;
        let truth = gt.truth_at(ts);
        let pose = truth.camera_pose();
        let mut observations = Vec::new();
        for lm in &map.landmarks {
            let pc = pose.transform_point(&lm.position);
            if pc.z <= CAPTURE_MIN_DEPTH {
                continue;
            }
            if let Some((u, v)) = map.intrinsics.project(&pc) {
                if map.intrinsics.contains(u, v) {
                    observations.push((
                        lm.id,
                        u + sigma_px * unit.sample(&mut rng),
                        v + sigma_px * unit.sample(&mut rng),
                    ));
                }
            }
        }
        frames.push(CameraFrame { ts, observations });
    }
    Ok(frames)
}

/// World-to-camera rotation of a camera at `position` whose boresight
/// points at the scene center, image-down toward the table. Matches the
/// attitude the analytic trajectory uses.
pub fn look_at_center(position: &Vector3<f64>) -> Matrix3<f64> {
    let fwd = (-position).normalize();
    let right = fwd.cross(&Vector3::z()).normalize();
    let down = fwd.cross(&right);
    Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()])
}

/// Camera-IMU mounting used by the standard scenario: a deliberate few
/// degrees of rotation and centimeters of lever arm so extrinsic handling
/// is exercised by every run.
pub fn default_extrinsics() -> Extrinsics {
    Extrinsics {
        r_itoc: crate::se3::so3_exp(&Vector3::new(0.10, -0.08, 0.05)),
        p_iinc: Vector3::new(0.015, -0.010, 0.020),
        time_offset: 0.0,
    }
}

/// Desk scene: 200 landmarks on a 1 m x 1 m table plane at z = 0 plus 100
/// on a surrounding wall ring, with a textured background.
pub fn desk_scene(seed: u64) -> MapModel {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut landmarks = Vec::with_capacity(300);
    for id in 0..200u32 {
        let x = rng.gen_range(-0.5..0.5);
        let y = rng.gen_range(-0.5..0.5);
        let magnitude = rng.gen_range(0.3..0.7);
        let sign = if id % 2 == 0 { 1.0 } else { -1.0 };
        landmarks.push(Landmark {
            id,
            position: Vector3::new(x, y, 0.0),
            amplitude: sign * magnitude,
            sigma_px: rng.gen_range(1.2..2.0),
        });
    }
    for id in 200..300u32 {
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let z = rng.gen_range(0.0..1.4);
        let magnitude = rng.gen_range(0.3..0.7);
        let sign = if id % 2 == 0 { 1.0 } else { -1.0 };
        landmarks.push(Landmark {
            id,
            position: Vector3::new(2.2 * phi.cos(), 2.2 * phi.sin(), z),
            amplitude: sign * magnitude,
            sigma_px: rng.gen_range(1.2..2.2),
        });
    }
    MapModel {
        intrinsics: CameraIntrinsics {
            width: 64,
            height: 64,
            focal: 60.0,
            cx: 32.0,
            cy: 32.0,
        },
        landmarks,
        background: BackgroundModel { amplitude: 1.0 },
        render_latency: 0.2,
        changes: Vec::new(),
    }
}

/// Marks the `n_changed` table landmarks closest to the scene center as
/// altered in the world: each is displaced and flips contrast, emulating
/// scene changes the prior map does not know about.
pub fn apply_scene_changes(map: &mut MapModel, n_changed: usize) {
    let mut table: Vec<(f64, u32, f64)> = map
        .landmarks
        .iter()
        .filter(|lm| lm.id < 200)
        .map(|lm| (lm.position.xy().norm(), lm.id, lm.amplitude))
        .collect();
    table.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    map.changes = table
        .into_iter()
        .take(n_changed)
        .map(|(_, id, amplitude)| LandmarkChange {
            id,
            offset: Vector3::new(0.05, -0.04, 0.06),
            amplitude: -amplitude,
        })
        .collect();
}

// ---------------------------------------------------------------------------
// Second-order jets: scalars carrying value, first, and second time
// derivative through arithmetic.

#[derive(Debug, Clone, Copy)]
struct Jet {
    v: f64,
    d: f64,
    a: f64,
}

impl Jet {
    fn con(v: f64) -> Jet {
        Jet { v, d: 0.0, a: 0.0 }
    }

    fn sin(self) -> Jet {
        let (s, c) = self.v.sin_cos();
        Jet {
            v: s,
            d: c * self.d,
            a: -s * self.d * self.d + c * self.a,
        }
    }

    fn cos(self) -> Jet {
        let (s, c) = self.v.sin_cos();
        Jet {
            v: c,
            d: -s * self.d,
            a: -c * self.d * self.d - s * self.a,
        }
    }

    fn sqrt(self) -> Jet {
        let s = self.v.sqrt();
        let d = self.d / (2.0 * s);
        Jet {
            v: s,
            d,
            a: self.a / (2.0 * s) - self.d * self.d / (4.0 * s * s * s),
        }
    }

    fn recip(self) -> Jet {
        let inv = 1.0 / self.v;
        Jet {
            v: inv,
            d: -self.d * inv * inv,
            a: (2.0 * self.d * self.d * inv - self.a) * inv * inv,
        }
    }
}

impl std::ops::Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet {
            v: self.v + o.v,
            d: self.d + o.d,
            a: self.a + o.a,
        }
    }
}

impl std::ops::Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        Jet {
            v: self.v - o.v,
            d: self.d - o.d,
            a: self.a - o.a,
        }
    }
}

impl std::ops::Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        Jet {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
            a: self.a * o.v + 2.0 * self.d * o.d + self.v * o.a,
        }
    }
}

impl std::ops::Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, s: f64) -> Jet {
        Jet {
            v: self.v * s,
            d: self.d * s,
            a: self.a * s,
        }
    }
}

impl std::ops::Div for Jet {
    type Output = Jet;
    fn div(self, o: Jet) -> Jet {
        self * o.recip()
    }
}

impl std::ops::Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        Jet {
            v: -self.v,
            d: -self.d,
            a: -self.a,
        }
    }
}

type JVec = [Jet; 3];
type JMat = [[Jet; 3]; 3];

fn jv_con(v: Vector3<f64>) -> JVec {
    [Jet::con(v.x), Jet::con(v.y), Jet::con(v.z)]
}

fn jv_add(a: JVec, b: JVec) -> JVec {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn jv_neg(a: JVec) -> JVec {
    [-a[0], -a[1], -a[2]]
}

fn jv_scale(a: JVec, s: Jet) -> JVec {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn jv_dot(a: JVec, b: JVec) -> Jet {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn jv_cross(a: JVec, b: JVec) -> JVec {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn jv_normalize(a: JVec) -> JVec {
    jv_scale(a, jv_dot(a, a).sqrt().recip())
}

/// Rows of a matrix whose rows are the given vectors.
fn jm_from_rows(r0: JVec, r1: JVec, r2: JVec) -> JMat {
    [r0, r1, r2]
}

/// Constant matrix times jet matrix.
fn jm_const_mul(c: &Matrix3<f64>, m: &JMat) -> JMat {
    let mut out = [[Jet::con(0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = Jet::con(0.0);
            for k in 0..3 {
                s = s + m[k][j] * c[(i, k)];
            }
            out[i][j] = s;
        }
    }
    out
}

/// Jet matrix times jet vector.
fn jm_vmul(m: &JMat, v: JVec) -> JVec {
    [
        jv_dot(m[0], v),
        jv_dot(m[1], v),
        jv_dot(m[2], v),
    ]
}

fn jm_value(m: &JMat) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j].v)
}

fn jm_d1(m: &JMat) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j].d)
}

/// Orbit angle as a jet of time: zero during the prelude, quintic spin-up
/// over the ramp, constant rate afterwards.
fn angle_jet(spec: &TrajectorySpec, t: f64) -> Jet {
    let omega = spec.angular_rate;
    if t <= spec.prelude || omega == 0.0 {
        return Jet::con(0.0);
    }
    let tau = (t - spec.prelude) / spec.ramp;
    if tau < 1.0 {
        // s5 integrates the quintic smoothstep; s5(1) = 1/2.
        let s5 = tau.powi(4) * (tau * tau - 3.0 * tau + 2.5);
        let rate = tau * tau * tau * (6.0 * tau * tau - 15.0 * tau + 10.0);
        let accel = tau * tau * (30.0 * tau * tau - 60.0 * tau + 30.0);
        Jet {
            v: omega * spec.ramp * s5,
            d: omega * rate,
            a: omega * accel / spec.ramp,
        }
    } else {
        Jet {
            v: omega * (0.5 * spec.ramp + (t - spec.prelude - spec.ramp)),
            d: omega,
            a: 0.0,
        }
    }
}

/// Full kinematic evaluation at time `t`.
fn kinematics(spec: &TrajectorySpec, extrinsics: &Extrinsics, t: f64) -> TruthSample {
    let theta = angle_jet(spec, t);
    let p_cam: JVec = [
        theta.cos() * spec.radius,
        theta.sin() * spec.radius,
        (theta * spec.bob_cycles).sin() * spec.bob_amplitude + Jet::con(spec.height),
    ];

    // Look-at attitude: boresight toward the scene center, image-down
    // toward the table.
    let fwd = jv_normalize(jv_neg(p_cam));
    let up = jv_con(Vector3::new(0.0, 0.0, 1.0));
    let right = jv_normalize(jv_cross(fwd, up));
    let down = jv_cross(fwd, right);
    let r_wtoc = jm_from_rows(right, down, fwd);

    // IMU chain: T_WtoI = T_CtoI * T_WtoC with constant extrinsics.
    let r_ctoi = extrinsics.r_itoc.transpose();
    let p_cini = -(r_ctoi * extrinsics.p_iinc);
    let r_wtoi = jm_const_mul(&r_ctoi, &r_wtoc);
    // Translation of the world-to-IMU map.
    let t_wtoc = jv_neg(jm_vmul(&r_wtoc, p_cam));
    let t_wtoi = jv_add(
        {
            let mut v = [Jet::con(0.0); 3];
            for i in 0..3 {
                let mut s = Jet::con(0.0);
                for k in 0..3 {
                    s = s + t_wtoc[k] * r_ctoi[(i, k)];
                }
                v[i] = s;
            }
            v
        },
        jv_con(p_cini),
    );

    // IMU center in world coordinates: -R^T t with jets.
    let r_val = jm_value(&r_wtoi);
    let r_dot = jm_d1(&r_wtoi);
    let mut p_i = Vector3::zeros();
    let mut v_i = Vector3::zeros();
    let mut a_i = Vector3::zeros();
    for i in 0..3 {
        let mut acc = Jet::con(0.0);
        for k in 0..3 {
            acc = acc + r_wtoi[k][i] * t_wtoi[k];
        }
        p_i[i] = -acc.v;
        v_i[i] = -acc.d;
        a_i[i] = -acc.a;
    }

    // Body rates from R_ItoW^T d/dt R_ItoW = R_WtoI d/dt R_WtoI^T.
    let omega_hat = r_val * r_dot.transpose();
    let anti = (omega_hat - omega_hat.transpose()) * 0.5;
    let omega = crate::se3::vee(&anti);

    let r_wtoc_val = jm_value(&r_wtoc);
    let p_c = Vector3::new(p_cam[0].v, p_cam[1].v, p_cam[2].v);

    TruthSample {
        ts: t,
        r_wtoi: r_val,
        p_i,
        v_i,
        a_i,
        omega,
        r_wtoc: r_wtoc_val,
        p_c,
    }
}
