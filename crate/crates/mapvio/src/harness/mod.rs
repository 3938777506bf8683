//! Experiment orchestration: deterministic virtual-time runs of the full
//! estimation pipeline on synthetic data, plus metric computation and
//! result export.
//!
//! All sensor and render events are merged into one queue ordered by
//! timestamp with a fixed type priority (IMU, then camera, then render
//! request, then render delivery), so a run is a pure function of config
//! and seed. Wall-clock time never enters experiment outputs.

pub mod config;
pub mod io;
pub mod learn;
pub mod metrics;
pub mod refine;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::imu::{attitude_from_gravity, bootstrap_vel_bias, ImuSample, ImuState, GRAVITY};
use crate::init::load_checkpoint;
use crate::map::{
    fast_detect, render, schedule_renders, ssim_grid_filter, MapModel, SSIM_THRESHOLD,
};
use crate::msckf::{
    captured_update, rendered_update, FeatureTrack, FilterState, MapMatch, UpdateReport,
};
use crate::se3::{se3_exp, so3_log, Pose, Twist};
use crate::sim::{
    apply_scene_changes, desk_scene, default_extrinsics, generate_truth, synthesize_camera,
    synthesize_imu, CameraFrame, GroundTruth, ImuSynthesis,
};

use config::{ExperimentConfig, InitMode};
use io::UpdateLogRow;
use learn::{validation_metrics, RegionSpec};
use metrics::{compute_ate, nees, MetricsReport, StampedPose, UpdateStats};

/// SSIM gate grid over the rendered/captured image pair.
pub const SSIM_GRID: (usize, usize) = (8, 8);
/// Corner threshold for feature extraction on rendered images.
pub const FAST_THRESHOLD: f64 = 0.05;
/// Corners associate to a rendered landmark within this pixel radius.
pub const MATCH_RADIUS_PX: f64 = 3.0;
/// Pixel-noise floor of the measurement model, keeping update algebra
/// well conditioned when a scenario synthesizes noise-free observations.
pub const SIGMA_PX_MODEL_FLOOR: f64 = 1e-4;

/// Seed-stream tags; each consumer of randomness gets its own generator
/// so adding one never shifts another.
const STREAM_BIAS: u64 = 0x1001;
const STREAM_IMU: u64 = 0x2002;
const STREAM_CAMERA: u64 = 0x3003;
const STREAM_RENDERED: u64 = 0x4004;
const STREAM_PERTURB: u64 = 0x5005;
const STREAM_VALIDATION: u64 = 0x6006;

fn stream_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag)
}

/// How the filter's global frame was pinned to the simulation world at
/// startup.
#[derive(Debug, Clone, Copy)]
pub struct Anchor {
    /// World-to-global yaw solved from the initial attitude estimate.
    pub psi: f64,
    /// World position of the IMU at initialization time.
    pub p0_w: Vector3<f64>,
    /// Exact map-to-global transform implied by the initial estimate.
    pub map_to_global_true: Pose,
    /// Transform the filter actually uses for map-anchored updates.
    pub map_to_global_est: Pose,
    /// Covariance of the right-multiplicative twist error of the estimate.
    pub sigma_align: Matrix6<f64>,
}

/// One delivered render and everything the filter did with it.
#[derive(Debug, Clone)]
pub struct DeliveryLog {
    pub request_ts: f64,
    pub delivery_ts: f64,
    /// Timestamp of the clone the render was anchored to.
    pub clone_ts: f64,
    /// Estimated map-frame camera pose the map was rendered from.
    pub render_pose: Pose,
    pub grid: (usize, usize),
    /// Row-major cell acceptance from the similarity gate.
    pub accepted_cells: Vec<bool>,
    /// Row-major cell similarity scores behind the acceptance mask.
    pub cell_ssim: Vec<f64>,
    /// Features handed to the filter: id, measured pixel, and the grid
    /// cell the match came from.
    pub features: Vec<(u32, f64, f64, (usize, usize))>,
    pub accepted_features: usize,
    pub rejected_gate: usize,
    pub rejected_geometry: usize,
}

/// Complete record of one run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub seed: u64,
    pub metrics: MetricsReport,
    /// Estimated IMU poses in the global frame, one per processed camera
    /// frame.
    pub est_traj: Vec<StampedPose>,
    /// True IMU poses in the world frame at the same timestamps.
    pub gt_traj: Vec<StampedPose>,
    /// `(t, NEES)` of the 15 IMU error states.
    pub nees: Vec<(f64, f64)>,
    pub update_log: Vec<UpdateLogRow>,
    pub deliveries: Vec<DeliveryLog>,
    pub anchor: Anchor,
}

/// Yaw angle best aligning the initial attitude estimate with truth:
/// minimizes the residual rotation of `r_wtoi * Rz(psi)` against the
/// estimate. Both frames share the gravity direction, so only yaw is free.
pub fn solve_yaw_alignment(r_wtoi_true: &Matrix3<f64>, r_gtoi_est: &Matrix3<f64>) -> f64 {
    let b = r_wtoi_true.transpose() * r_gtoi_est;
    (b[(1, 0)] - b[(0, 1)]).atan2(b[(0, 0)] + b[(1, 1)])
}

fn rot_z(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Initial 15x15 error covariance of a filter leveled from a stationary
/// window of length `window` seconds, given the leveled attitude `r0`.
///
/// Leveling absorbs the horizontal accelerometer bias into tilt (the two
/// are indistinguishable at rest), so the attitude and accelerometer-bias
/// blocks carry the bias prior and their cross covariance. Those errors
/// are gravity-aligned by nature; the filter's attitude error lives in
/// the IMU frame, so the blocks are conjugated by `r0`. Yaw is pinned by
/// construction of the global frame. Velocity and position start at the
/// frame definition itself and get small floors only.
pub fn initial_covariance(
    noise: &config::NoiseConfig,
    window: f64,
    r0: &Matrix3<f64>,
) -> DMatrix<f64> {
    let g = GRAVITY.norm();
    let accel_mean_var = noise.sigma_a.powi(2) / window;
    let gyro_mean_var = noise.sigma_g.powi(2) / window;
    let bias_a_var = noise.accel_bias_std.powi(2);
    let walk_a = noise.sigma_wa.powi(2) * window / 3.0;
    let walk_g = noise.sigma_wg.powi(2) * window / 3.0;
    // Bias plus averaged white noise, as seen through the leveling.
    let s2 = bias_a_var + accel_mean_var;

    let horiz = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
    // Maps a gravity-frame vector to the tilt it induces through leveling.
    let a = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let yaw_floor = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1e-10);

    let sig_tt = r0 * ((s2 / (g * g)) * horiz + yaw_floor) * r0.transpose();
    let sig_aa = (bias_a_var - accel_mean_var) * (r0 * horiz * r0.transpose())
        + (accel_mean_var + walk_a) * Matrix3::identity();
    let sig_ta = -(bias_a_var / g) * (r0 * a * r0.transpose());

    let mut p = DMatrix::<f64>::zeros(15, 15);
    for i in 0..3 {
        for j in 0..3 {
            p[(i, j)] = sig_tt[(i, j)];
            p[(12 + i, 12 + j)] = sig_aa[(i, j)];
            p[(i, 12 + j)] = sig_ta[(i, j)];
            p[(12 + j, i)] = sig_ta[(i, j)];
        }
    }
    for i in 3..6 {
        p[(i, i)] = 1e-12;
    }
    for i in 6..9 {
        p[(i, i)] = 1e-8;
    }
    for i in 9..12 {
        p[(i, i)] = gyro_mean_var + walk_g;
    }
    for i in 0..15 {
        p[(i, i)] = p[(i, i)].max(1e-12);
    }
    p
}

/// Linear interpolation of the measurement stream at time `t`, clamped at
/// the ends.
fn sample_interp(samples: &[ImuSample], t: f64) -> ImuSample {
    let first = samples.first().expect("non-empty stream");
    let last = samples.last().unwrap();
    if t <= first.ts {
        return ImuSample { ts: t, ..*first };
    }
    if t >= last.ts {
        return ImuSample { ts: t, ..*last };
    }
    let k = samples.partition_point(|s| s.ts <= t);
    let (a, b) = (&samples[k - 1], &samples[k]);
    let alpha = (t - a.ts) / (b.ts - a.ts);
    ImuSample {
        ts: t,
        gyro: a.gyro + (b.gyro - a.gyro) * alpha,
        accel: a.accel + (b.accel - a.accel) * alpha,
    }
}

/// Propagates the filter to time `t`, splitting the span at measurement
/// boundaries so integration always sees the finest available data.
fn propagate_to(
    fs: &mut FilterState,
    samples: &[ImuSample],
    noise: &crate::imu::NoiseParams,
    t: f64,
) -> Result<()> {
    const EPS: f64 = 1e-12;
    while fs.imu.ts < t - EPS {
        let cur = fs.imu.ts;
        let k = samples.partition_point(|s| s.ts <= cur + EPS);
        let t_next = if k < samples.len() {
            samples[k].ts.min(t)
        } else {
            t
        };
        let s0 = sample_interp(samples, cur);
        let s1 = sample_interp(samples, t_next);
        fs.propagate(&s0, &s1, noise)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    Imu,
    Camera,
    RenderRequest,
    RenderDelivery,
}

impl EventKind {
    fn priority(self) -> u8 {
        match self {
            EventKind::Imu => 0,
            EventKind::Camera => 1,
            EventKind::RenderRequest => 2,
            EventKind::RenderDelivery => 3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    ts: f64,
    kind: EventKind,
    idx: usize,
}

#[derive(Debug, Clone, Copy)]
struct PendingRender {
    request_ts: f64,
    clone_ts: f64,
    render_pose: Pose,
}

struct Tracker {
    active: BTreeMap<u32, FeatureTrack>,
}

impl Tracker {
    fn new() -> Self {
        Tracker {
            active: BTreeMap::new(),
        }
    }

    /// Tracks to flush before processing a frame: tracks whose feature
    /// vanished, plus tracks touching the clone about to leave a full
    /// window. Returned in id order.
    fn take_closed(
        &mut self,
        visible: &dyn Fn(u32) -> bool,
        oldest_clone_ts: Option<f64>,
    ) -> Vec<FeatureTrack> {
        let mut closed = Vec::new();
        let ids: Vec<u32> = self.active.keys().copied().collect();
        for id in ids {
            let first_ts = self.active[&id].obs[0].0;
            let dead = !visible(id);
            let expiring = oldest_clone_ts.is_some_and(|t0| first_ts <= t0 + 1e-9);
            if dead || expiring {
                let track = self.active.remove(&id).unwrap();
                if track.obs.len() >= 2 {
                    closed.push(track);
                }
            }
        }
        closed
    }

    fn observe(&mut self, ts: f64, observations: &[(u32, f64, f64)]) {
        for &(id, u, v) in observations {
            self.active
                .entry(id)
                .or_insert_with(|| FeatureTrack {
                    id,
                    obs: Vec::new(),
                })
                .obs
                .push((ts, u, v));
        }
    }
}

fn add_update_stats(stats: &mut UpdateStats, report: &UpdateReport) {
    stats.updates += 1;
    stats.features_accepted += report.accepted;
    stats.rejected_gate += report.rejected_gate;
    stats.rejected_geometry += report.rejected_geometry;
    stats.rows += report.rows;
}

/// Builds the anchor for the configured initialization mode.
fn build_anchor(
    cfg: &ExperimentConfig,
    seed: u64,
    map: &MapModel,
    world: &MapModel,
    gt: &GroundTruth,
    fs: &FilterState,
) -> Result<Anchor> {
    let t_init = gt.spec.prelude;
    let truth = gt.truth_at(t_init);
    let psi = solve_yaw_alignment(&truth.r_wtoi, &fs.imu.r_gtoi);
    let rz_t = rot_z(psi).transpose();
    let map_to_global_true = Pose::new(rz_t, -(rz_t * truth.p_i));

    let (map_to_global_est, sigma_align) = match cfg.filter.init_mode {
        InitMode::GroundTruth => (map_to_global_true, Matrix6::zeros()),
        InitMode::Perturbed => {
            let mut rng = ChaCha12Rng::seed_from_u64(stream_seed(seed, STREAM_PERTURB));
            let sr = cfg.init.perturb_rot_deg.to_radians();
            let sp = cfg.init.perturb_pos_m;
            let mut d = nalgebra::Vector6::<f64>::zeros();
            for i in 0..3 {
                let x: f64 = StandardNormal.sample(&mut rng);
                d[i] = sr * x;
            }
            for i in 3..6 {
                let x: f64 = StandardNormal.sample(&mut rng);
                d[i] = sp * x;
            }
            // est = true * exp(-d), so true = est * exp(d) with d drawn
            // from exactly the covariance reported below.
            let est = map_to_global_true.compose(&se3_exp(&Twist::from_vector(&(-d))));
            let mut sigma = Matrix6::zeros();
            for i in 0..3 {
                sigma[(i, i)] = sr * sr;
            }
            for i in 3..6 {
                sigma[(i, i)] = sp * sp;
            }
            (est, sigma)
        }
        InitMode::Learned => {
            let path = cfg.init.checkpoint.as_ref().ok_or_else(|| {
                Error::Config("learned init requires init.checkpoint".into())
            })?;
            let model = load_checkpoint(Path::new(path))?;
            // The first camera image: what the real scene looks like from
            // the true starting pose.
            let first_image = render(world, &gt.truth_at(0.0).camera_pose()).image;
            let (pred, _) = crate::init::relocalize(&model, &first_image)?;
            // Chain map->camera->IMU->global using the current estimate;
            // the vehicle is stationary through the prelude, so the pose
            // at the first image equals the pose at initialization.
            let imu_to_global = Pose::new(fs.imu.r_gtoi, -(fs.imu.r_gtoi * fs.imu.p)).inverse();
            let imu_to_camera = Pose::new(fs.extrinsics.r_itoc, fs.extrinsics.p_iinc);
            let est = imu_to_global
                .compose(&imu_to_camera.inverse())
                .compose(&pred);
            let (errors, _, _) = validation_metrics(
                &model,
                map,
                &RegionSpec::default(),
                cfg.init.validation_samples,
                stream_seed(seed, STREAM_VALIDATION),
            )?;
            let sigma = crate::init::estimate_sigma_init(&errors, cfg.init.sigma_floor)?;
            (est, sigma)
        }
    };
    Ok(Anchor {
        psi,
        p0_w: truth.p_i,
        map_to_global_true,
        map_to_global_est,
        sigma_align,
    })
}

/// Deterministic per-seed sensor data: the prior map, the (possibly
/// changed) world, ground truth, and the noisy IMU and camera streams.
pub struct SensorStreams {
    pub map: MapModel,
    pub world: MapModel,
    pub gt: GroundTruth,
    pub synth: ImuSynthesis,
    pub frames: Vec<CameraFrame>,
}

/// Synthesizes the sensor streams one configured seed observes. The run
/// loop and the dataset exporter both consume this, so exported files
/// match what a run actually filters.
pub fn sensor_streams(cfg: &ExperimentConfig, seed: u64) -> Result<SensorStreams> {
    let sc = &cfg.scenario;
    let mut map = desk_scene(sc.scene_seed);
    if sc.changed_landmarks > 0 {
        apply_scene_changes(&mut map, sc.changed_landmarks);
    }
    let world = map.world_model();
    let gt = generate_truth(&sc.trajectory, &default_extrinsics(), sc.imu_rate_hz)?;

    let mut bias_rng = ChaCha12Rng::seed_from_u64(stream_seed(seed, STREAM_BIAS));
    let mut draw3 = |std: f64| {
        let mut gauss = || -> f64 { StandardNormal.sample(&mut bias_rng) };
        Vector3::new(std * gauss(), std * gauss(), std * gauss())
    };
    let bg0 = draw3(cfg.noise.gyro_bias_std);
    let ba0 = draw3(cfg.noise.accel_bias_std);

    let synth = synthesize_imu(&gt, &cfg.noise.imu(), bg0, ba0, stream_seed(seed, STREAM_IMU));
    let frames = synthesize_camera(
        &gt,
        &world,
        sc.camera_rate_hz,
        cfg.noise.sigma_px,
        stream_seed(seed, STREAM_CAMERA),
    )?;
    Ok(SensorStreams {
        map,
        world,
        gt,
        synth,
        frames,
    })
}

/// Runs one seed of the configured experiment.
pub fn run_single(cfg: &ExperimentConfig, seed: u64) -> Result<RunArtifacts> {
    cfg.validate()?;
    let sc = &cfg.scenario;
    let ext = default_extrinsics();
    let SensorStreams {
        map,
        world,
        gt,
        synth,
        frames,
    } = sensor_streams(cfg, seed)?;
    let intr = map.intrinsics;
    let imu_noise = cfg.noise.imu();

    // Level and bootstrap from the stationary prelude.
    let t_init = sc.trajectory.prelude;
    let prelude: Vec<ImuSample> = synth
        .samples
        .iter()
        .take_while(|s| s.ts <= t_init + 1e-9)
        .copied()
        .collect();
    let mean_accel: Vector3<f64> =
        prelude.iter().map(|s| s.accel).sum::<Vector3<f64>>() / prelude.len() as f64;
    let r_gtoi0 = attitude_from_gravity(&mean_accel)?;
    let (v0, bg_est, ba_est) = bootstrap_vel_bias(&prelude, &r_gtoi0)?;
    let p0 = initial_covariance(&cfg.noise, t_init, &r_gtoi0);
    let mut fs = FilterState::new(
        ImuState {
            ts: t_init,
            r_gtoi: r_gtoi0,
            p: Vector3::zeros(),
            v: v0,
            bg: bg_est,
            ba: ba_est,
        },
        &p0,
        ext,
        cfg.filter.max_clones,
    )?;

    let anchor = build_anchor(cfg, seed, &map, &world, &gt, &fs)?;

    let sigma_px_model = cfg.noise.sigma_px.max(SIGMA_PX_MODEL_FLOOR);
    let sigma_render_model = cfg.noise.sigma_render_px.max(SIGMA_PX_MODEL_FLOOR);
    let mut rendered_rng = ChaCha12Rng::seed_from_u64(stream_seed(seed, STREAM_RENDERED));

    // Merge all sensor and render events into one ordered timeline.
    let mut events: Vec<Event> = Vec::new();
    for (i, s) in synth.samples.iter().enumerate() {
        if s.ts > t_init {
            events.push(Event {
                ts: s.ts,
                kind: EventKind::Imu,
                idx: i,
            });
        }
    }
    for (i, f) in frames.iter().enumerate() {
        if f.ts >= t_init - 1e-9 {
            events.push(Event {
                ts: f.ts,
                kind: EventKind::Camera,
                idx: i,
            });
        }
    }
    let renders = if cfg.filter.map_updates {
        schedule_renders(
            sc.camera_rate_hz,
            sc.render_rate_hz,
            map.render_latency,
            sc.trajectory.duration,
        )?
    } else {
        Vec::new()
    };
    for (i, r) in renders.iter().enumerate() {
        events.push(Event {
            ts: r.request_ts,
            kind: EventKind::RenderRequest,
            idx: i,
        });
        events.push(Event {
            ts: r.delivery_ts,
            kind: EventKind::RenderDelivery,
            idx: i,
        });
    }
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&a, &b| {
        events[a]
            .ts
            .total_cmp(&events[b].ts)
            .then(events[a].kind.priority().cmp(&events[b].kind.priority()))
            .then(a.cmp(&b))
    });

    let mut tracker = Tracker::new();
    let mut pending_renders: Vec<Option<PendingRender>> = vec![None; renders.len()];
    let mut est_traj = Vec::new();
    let mut gt_traj = Vec::new();
    let mut nees_log = Vec::new();
    let mut update_log = Vec::new();
    let mut deliveries = Vec::new();
    let mut captured_stats = UpdateStats::default();
    let mut rendered_stats = UpdateStats::default();

    for &oi in &order {
        let ev = events[oi];
        match ev.kind {
            EventKind::Imu => {
                propagate_to(&mut fs, &synth.samples, &imu_noise, ev.ts)?;
            }
            EventKind::Camera => {
                propagate_to(&mut fs, &synth.samples, &imu_noise, ev.ts)?;
                let frame = &frames[ev.idx];
                let window_full = fs.clones.len() == fs.max_clones;
                let oldest = if window_full {
                    Some(fs.clones[0].ts)
                } else {
                    None
                };
                let obs = &frame.observations;
                let closed = tracker.take_closed(
                    &|id| obs.iter().any(|&(fid, _, _)| fid == id),
                    oldest,
                );
                if !closed.is_empty() {
                    let report = captured_update(&mut fs, &closed, &intr, sigma_px_model)?;
                    add_update_stats(&mut captured_stats, &report);
                    update_log.push(UpdateLogRow {
                        ts: frame.ts,
                        kind: "captured",
                        accepted: report.accepted,
                        rejected_gate: report.rejected_gate,
                        rejected_geometry: report.rejected_geometry,
                        rows: report.rows,
                        correction_norm: report.correction_norm,
                    });
                }
                if window_full {
                    fs.marginalize_clone(0)?;
                }
                fs.augment_clone(frame.ts)?;
                tracker.observe(frame.ts, obs);

                est_traj.push(StampedPose {
                    ts: frame.ts,
                    rotation: fs.imu.r_gtoi,
                    position: fs.imu.p,
                });
                let truth = gt.truth_at(frame.ts);
                gt_traj.push(StampedPose {
                    ts: frame.ts,
                    rotation: truth.r_wtoi,
                    position: truth.p_i,
                });
                // Zero-process-noise runs collapse the covariance to numerical
                // rank deficiency; the statistic is undefined there, so the
                // sample is skipped rather than aborting the run.
                if let Ok(value) = imu_nees(&fs, &gt, &synth, &anchor, frame.ts) {
                    nees_log.push((frame.ts, value));
                }
            }
            EventKind::RenderRequest => {
                if let Some(cc) = fs.select_closest_clone(ev.ts) {
                    let render_pose = fs
                        .camera_pose_of_clone(cc)
                        .compose(&anchor.map_to_global_est);
                    pending_renders[ev.idx] = Some(PendingRender {
                        request_ts: ev.ts,
                        clone_ts: fs.clones[cc].ts,
                        render_pose,
                    });
                }
            }
            EventKind::RenderDelivery => {
                let Some(pending) = pending_renders[ev.idx].take() else {
                    continue;
                };
                propagate_to(&mut fs, &synth.samples, &imu_noise, ev.ts)?;
                let (log, report) = deliver_render(
                    cfg,
                    &mut fs,
                    &map,
                    &world,
                    &gt,
                    &anchor,
                    &pending,
                    ev.ts,
                    sigma_render_model,
                    &mut rendered_rng,
                )?;
                if let Some(report) = report {
                    add_update_stats(&mut rendered_stats, &report);
                    update_log.push(UpdateLogRow {
                        ts: ev.ts,
                        kind: "rendered",
                        accepted: report.accepted,
                        rejected_gate: report.rejected_gate,
                        rejected_geometry: report.rejected_geometry,
                        rows: report.rows,
                        correction_norm: report.correction_norm,
                    });
                }
                deliveries.push(log);
            }
        }
    }

    let ate = compute_ate(&est_traj, &gt_traj)?;
    let mean_nees = if nees_log.is_empty() {
        0.0
    } else {
        nees_log.iter().map(|&(_, v)| v).sum::<f64>() / nees_log.len() as f64
    };
    let metrics = MetricsReport {
        seed,
        ate,
        captured: captured_stats,
        rendered: rendered_stats,
        mean_nees,
    };
    Ok(RunArtifacts {
        seed,
        metrics,
        est_traj,
        gt_traj,
        nees: nees_log,
        update_log,
        deliveries,
        anchor,
    })
}

/// Executes one delivered render: similarity gate, corner extraction,
/// map association, and the anchored filter update.
#[allow(clippy::too_many_arguments)]
fn deliver_render(
    cfg: &ExperimentConfig,
    fs: &mut FilterState,
    map: &MapModel,
    world: &MapModel,
    gt: &GroundTruth,
    anchor: &Anchor,
    pending: &PendingRender,
    delivery_ts: f64,
    sigma_render_model: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(DeliveryLog, Option<UpdateReport>)> {
    let intr = map.intrinsics;
    // The map as the filter believes it looks, from the estimated pose.
    let rendered = render(map, &pending.render_pose);
    // The scene as the camera actually saw it at the anchored clone's time.
    let true_cam = gt.truth_at(pending.clone_ts).camera_pose();
    let captured_img = render(world, &true_cam).image;

    let gate = ssim_grid_filter(&rendered.image, &captured_img, SSIM_GRID, SSIM_THRESHOLD)?;
    let corners = fast_detect(&rendered.image, FAST_THRESHOLD);

    // Associate corners in accepted cells with rendered landmarks;
    // keep the nearest corner per landmark id.
    let mut matched: BTreeMap<u32, f64> = BTreeMap::new();
    for c in &corners {
        let (cu, cv) = (c.x as f64, c.y as f64);
        let (cx, cy) = gate.cell_of(cu, cv, intr.width, intr.height);
        if !gate.is_accepted(cx, cy) {
            continue;
        }
        for &(id, u, v) in &rendered.in_view {
            let d = ((cu - u).powi(2) + (cv - v).powi(2)).sqrt();
            if d <= MATCH_RADIUS_PX {
                let best = matched.entry(id).or_insert(f64::INFINITY);
                if d < *best {
                    *best = d;
                }
            }
        }
    }

    // Measure each matched landmark where the real camera saw it: the
    // world-state landmark projected from the true pose, with pixel noise.
    let noise_std = cfg.noise.sigma_render_px;
    let mut features = Vec::new();
    let mut matches = Vec::new();
    for (&id, _) in &matched {
        let Some(world_lm) = world.landmark(id) else {
            continue;
        };
        let pc = true_cam.transform_point(&world_lm.position);
        if pc.z <= crate::sim::CAPTURE_MIN_DEPTH {
            continue;
        }
        let Some((u0, v0)) = intr.project(&pc) else {
            continue;
        };
        let nu: f64 = StandardNormal.sample(rng);
        let nv: f64 = StandardNormal.sample(rng);
        let u = u0 + noise_std * nu;
        let v = v0 + noise_std * nv;
        if !intr.contains(u, v) {
            continue;
        }
        let cell = gate.cell_of(u, v, intr.width, intr.height);
        if !gate.is_accepted(cell.0, cell.1) {
            continue;
        }
        features.push((id, u, v, cell));
        matches.push(MapMatch {
            landmark_id: id,
            // The filter only knows the prior map's position.
            point_map: map.landmark(id).expect("map landmark").position,
            obs: vec![(pending.clone_ts + fs.extrinsics.time_offset, u, v)],
        });
    }

    let mut log = DeliveryLog {
        request_ts: pending.request_ts,
        delivery_ts,
        clone_ts: pending.clone_ts,
        render_pose: pending.render_pose,
        grid: gate.grid,
        accepted_cells: gate.accepted.clone(),
        cell_ssim: gate.cell_ssim.clone(),
        features,
        accepted_features: 0,
        rejected_gate: 0,
        rejected_geometry: 0,
    };
    if matches.is_empty() {
        return Ok((log, None));
    }
    let report = rendered_update(
        fs,
        &matches,
        &anchor.map_to_global_est,
        &anchor.sigma_align,
        &intr,
        sigma_render_model,
    )?;
    log.accepted_features = report.accepted;
    log.rejected_gate = report.rejected_gate;
    log.rejected_geometry = report.rejected_geometry;
    Ok((log, Some(report)))
}

/// NEES of the 15 IMU error states against anchored truth.
fn imu_nees(
    fs: &FilterState,
    gt: &GroundTruth,
    synth: &ImuSynthesis,
    anchor: &Anchor,
    t: f64,
) -> Result<f64> {
    let truth = gt.truth_at(t);
    let rz = rot_z(anchor.psi);
    let r_true_g = truth.r_wtoi * rz;
    let p_true_g = rz.transpose() * (truth.p_i - anchor.p0_w);
    let v_true_g = rz.transpose() * truth.v_i;
    let (bg_true, ba_true) = bias_at(synth, gt.imu_rate, t);

    let mut e = DVector::<f64>::zeros(15);
    let dtheta = -so3_log(&(r_true_g * fs.imu.r_gtoi.transpose()));
    for i in 0..3 {
        e[i] = dtheta[i];
        e[3 + i] = p_true_g[i] - fs.imu.p[i];
        e[6 + i] = v_true_g[i] - fs.imu.v[i];
        e[9 + i] = bg_true[i] - fs.imu.bg[i];
        e[12 + i] = ba_true[i] - fs.imu.ba[i];
    }
    let p_ii = fs.cov.view((0, 0), (15, 15)).into_owned();
    nees(&e, &p_ii)
}

/// True biases at `t`, interpolated between the synthesis samples.
fn bias_at(synth: &ImuSynthesis, rate: f64, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let x = (t * rate).max(0.0);
    let k = (x.floor() as usize).min(synth.biases.len() - 1);
    let k1 = (k + 1).min(synth.biases.len() - 1);
    let alpha = (x - k as f64).clamp(0.0, 1.0);
    let (bg0, ba0) = synth.biases[k];
    let (bg1, ba1) = synth.biases[k1];
    (bg0 + (bg1 - bg0) * alpha, ba0 + (ba1 - ba0) * alpha)
}

/// Runs every configured seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunArtifacts>> {
    cfg.validate()?;
    cfg.run.seeds.iter().map(|&s| run_single(cfg, s)).collect()
}

/// Writes trajectory, update-log, and metrics files for finished runs.
pub fn write_outputs(cfg: &ExperimentConfig, runs: &[RunArtifacts]) -> Result<()> {
    let Some(dir) = &cfg.run.output_dir else {
        return Ok(());
    };
    std::fs::create_dir_all(dir)?;
    let mut all_metrics = Vec::new();
    for run in runs {
        io::write_trajectory_csv(&dir.join(format!("est_traj_{}.csv", run.seed)), &run.est_traj)?;
        io::write_trajectory_csv(&dir.join(format!("gt_traj_{}.csv", run.seed)), &run.gt_traj)?;
        io::write_update_log_csv(&dir.join(format!("updates_{}.csv", run.seed)), &run.update_log)?;
        all_metrics.push(run.metrics.clone());
    }
    io::write_json(&dir.join("metrics.json"), &all_metrics)?;
    let mut csv = String::from(
        "seed,ate_orientation_deg,ate_position_m,mean_nees,captured_updates,captured_features,rendered_updates,rendered_features\n",
    );
    for m in &all_metrics {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.seed,
            m.ate.orientation_deg,
            m.ate.position_m,
            m.mean_nees,
            m.captured.updates,
            m.captured.features_accepted,
            m.rendered.updates,
            m.rendered.features_accepted,
        ));
    }
    std::fs::write(dir.join("metrics.csv"), csv)?;
    Ok(())
}

/// Evaluates configured gates over finished runs; returns a message per
/// violated gate.
pub fn check_gates(cfg: &ExperimentConfig, runs: &[RunArtifacts]) -> Vec<String> {
    let mut failures = Vec::new();
    let mut pos: Vec<f64> = runs.iter().map(|r| r.metrics.ate.position_m).collect();
    let mut rot: Vec<f64> = runs.iter().map(|r| r.metrics.ate.orientation_deg).collect();
    if let Some(bound) = cfg.check.max_position_ate_m {
        let med = learn::median(&mut pos);
        if !(med <= bound) {
            failures.push(format!(
                "median position ATE {med} m exceeds bound {bound} m"
            ));
        }
    }
    if let Some(bound) = cfg.check.max_orientation_ate_deg {
        let med = learn::median(&mut rot);
        if !(med <= bound) {
            failures.push(format!(
                "median orientation ATE {med} deg exceeds bound {bound} deg"
            ));
        }
    }
    failures
}
