//! Experiment configuration: one declarative TOML file describing the
//! scenario, noise levels, filter options, initialization, seeds, and
//! optional pass/fail gates. Unknown keys are rejected so typos fail
//! loudly instead of silently running defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::NoiseParams;
use crate::msckf::MAX_CLONES;
use crate::sim::TrajectorySpec;

/// Where the filter's map anchor comes from at startup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Relocalization network predicts the anchor from the first image.
    Learned,
    /// Exact anchor from simulation truth; diagnostic baseline.
    GroundTruth,
    /// Truth anchor perturbed by a seeded random twist of configured size.
    Perturbed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub trajectory: TrajectorySpec,
    pub imu_rate_hz: f64,
    pub camera_rate_hz: f64,
    pub render_rate_hz: f64,
    /// Seed for the landmark layout, independent of run seeds.
    pub scene_seed: u64,
    /// Landmarks displaced and re-shaded in the real scene but not in the
    /// prior map; zero keeps map and world identical.
    pub changed_landmarks: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            trajectory: TrajectorySpec::default(),
            imu_rate_hz: 200.0,
            camera_rate_hz: 30.0,
            render_rate_hz: 2.0,
            scene_seed: 1,
            changed_landmarks: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// IMU continuous-time densities, matching the filter's process model.
    pub sigma_g: f64,
    pub sigma_wg: f64,
    pub sigma_a: f64,
    pub sigma_wa: f64,
    /// Captured-feature pixel noise.
    pub sigma_px: f64,
    /// Rendered-feature pixel noise.
    pub sigma_render_px: f64,
    /// Per-axis standard deviation of the true initial gyro bias; the bias
    /// is drawn per run seed.
    pub gyro_bias_std: f64,
    /// Per-axis standard deviation of the true initial accel bias.
    pub accel_bias_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_g: 1.7e-4,
            sigma_wg: 2.0e-5,
            sigma_a: 2.0e-3,
            sigma_wa: 3.0e-4,
            sigma_px: 1.0,
            sigma_render_px: 2.0,
            gyro_bias_std: 2.0e-3,
            accel_bias_std: 2.0e-2,
        }
    }
}

impl NoiseConfig {
    pub fn imu(&self) -> NoiseParams {
        NoiseParams {
            sigma_g: self.sigma_g,
            sigma_wg: self.sigma_wg,
            sigma_a: self.sigma_a,
            sigma_wa: self.sigma_wa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Apply map-anchored rendered updates; off leaves a plain
    /// sliding-window filter on captured features.
    pub map_updates: bool,
    pub init_mode: InitMode,
    /// Metric-family parameter for the relocalization loss.
    pub metric_a: [f64; 3],
    pub max_clones: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            map_updates: true,
            init_mode: InitMode::GroundTruth,
            metric_a: [0.0, 0.0, 0.0],
            max_clones: MAX_CLONES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Trained relocalization model; required in learned mode.
    pub checkpoint: Option<PathBuf>,
    /// Validation renders used to estimate the anchor covariance in
    /// learned mode.
    pub validation_samples: usize,
    /// Diagonal floor added to the estimated anchor covariance.
    pub sigma_floor: f64,
    /// Perturbed mode: per-axis anchor error standard deviations.
    pub perturb_rot_deg: f64,
    pub perturb_pos_m: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            checkpoint: None,
            validation_samples: 64,
            sigma_floor: 1.0e-8,
            perturb_rot_deg: 1.0,
            perturb_pos_m: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    /// When set, trajectory, update-log, and metrics files are written here.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![1],
            output_dir: None,
        }
    }
}

/// Pass/fail gates evaluated in `--check` mode; absent bounds are not
/// checked.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    pub max_position_ate_m: Option<f64>,
    pub max_orientation_ate_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub noise: NoiseConfig,
    pub filter: FilterConfig,
    pub init: InitConfig,
    pub run: RunConfig,
    pub check: CheckConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Canonical serialized form; parsing it back yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        s.trajectory.validate()?;
        if s.imu_rate_hz <= 0.0 || s.camera_rate_hz <= 0.0 || s.render_rate_hz <= 0.0 {
            return Err(Error::Config("sensor rates must be positive".into()));
        }
        if s.render_rate_hz > s.camera_rate_hz {
            return Err(Error::Config(format!(
                "render rate {} Hz exceeds camera rate {} Hz",
                s.render_rate_hz, s.camera_rate_hz
            )));
        }
        if s.camera_rate_hz > s.imu_rate_hz {
            return Err(Error::Config(format!(
                "camera rate {} Hz exceeds IMU rate {} Hz",
                s.camera_rate_hz, s.imu_rate_hz
            )));
        }
        if s.trajectory.prelude <= 0.0 {
            return Err(Error::Config(
                "the filter levels from a stationary prelude; prelude must be positive".into(),
            ));
        }
        let n = &self.noise;
        for (name, v) in [
            ("sigma_g", n.sigma_g),
            ("sigma_wg", n.sigma_wg),
            ("sigma_a", n.sigma_a),
            ("sigma_wa", n.sigma_wa),
            ("sigma_px", n.sigma_px),
            ("sigma_render_px", n.sigma_render_px),
            ("gyro_bias_std", n.gyro_bias_std),
            ("accel_bias_std", n.accel_bias_std),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        let f = &self.filter;
        if f.max_clones < 2 || f.max_clones > MAX_CLONES {
            return Err(Error::Config(format!(
                "max_clones must be in 2..={MAX_CLONES}"
            )));
        }
        let a_norm =
            (f.metric_a[0].powi(2) + f.metric_a[1].powi(2) + f.metric_a[2].powi(2)).sqrt();
        if a_norm >= 1.0 {
            return Err(Error::Config(format!(
                "metric parameter norm {a_norm} must be below 1"
            )));
        }
        let i = &self.init;
        if i.validation_samples == 0 {
            return Err(Error::Config("validation_samples must be positive".into()));
        }
        if i.sigma_floor < 0.0 || i.perturb_rot_deg < 0.0 || i.perturb_pos_m < 0.0 {
            return Err(Error::Config(
                "init covariance floor and perturbation sizes must be non-negative".into(),
            ));
        }
        if f.init_mode == InitMode::Learned && f.map_updates && i.checkpoint.is_none() {
            return Err(Error::Config(
                "learned init requires init.checkpoint".into(),
            ));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        // And the canonical form is a fixed point.
        assert_eq!(text, back.to_toml());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse("[scenario]\nimu_rate_hz = 100.0\nbogus = 3\n")
            .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");

        let err = ExperimentConfig::parse("[mystery]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("mystery"), "{err}");
    }

    #[test]
    fn init_modes_parse_kebab_case() {
        for (text, mode) in [
            ("learned", InitMode::Learned),
            ("ground-truth", InitMode::GroundTruth),
            ("perturbed", InitMode::Perturbed),
        ] {
            let cfg = ExperimentConfig::parse(&format!(
                "[filter]\ninit_mode = \"{text}\"\nmap_updates = false\n"
            ))
            .unwrap();
            assert_eq!(cfg.filter.init_mode, mode);
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.render_rate_hz = 100.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.noise.sigma_px = -1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.filter.max_clones = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.filter.metric_a = [0.8, 0.8, 0.0];
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.run.seeds.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.scenario.trajectory.radius = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn learned_mode_requires_checkpoint() {
        let mut cfg = ExperimentConfig::default();
        cfg.filter.init_mode = InitMode::Learned;
        assert!(cfg.validate().is_err());
        cfg.init.checkpoint = Some("model.ckpt".into());
        cfg.validate().unwrap();
    }
}
