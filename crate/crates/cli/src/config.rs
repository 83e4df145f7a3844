//! Experiment configuration (TOML).
//!
//! Unknown keys are rejected. Every semantic error names the offending line
//! when it can be found in the source text.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use pboem_core::models::slam::{ControlNoise, SensorNoise, Vehicle};
use pboem_core::{BlockInit, BlockSchedule, ParticleRule};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = self
            .path
            .as_deref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "<config>".into());
        match self.line {
            Some(l) => write!(f, "{path}:{l}: {}", self.message),
            None => write!(f, "{path}: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelId {
    Sv,
    Lgssm,
    Finite,
    Slam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockInitFlag {
    /// Fresh draws from the initial law every block.
    #[default]
    Fixed,
    /// Resample the previous block's final filter.
    Carry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EStep {
    #[default]
    Particle,
    /// Kalman or forward-backward smoothing; lgssm and finite only.
    Exact,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_averaging_start() -> usize {
    25
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub model: ModelId,
    pub n_blocks: usize,
    pub n_replications: usize,
    pub master_seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// First block (1-based) entering the averaged estimate.
    #[serde(default = "default_averaging_start")]
    pub averaging_start: usize,
    #[serde(default)]
    pub block_init: BlockInitFlag,
    #[serde(default)]
    pub e_step: EStep,
    /// Abort when a block statistic leaves its domain instead of projecting.
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

/// `τ_n = ⌊c_tau n^a⌋`; particles `⌊c_n τ^d⌋` or a constant `n_particles`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub c_tau: f64,
    pub a: f64,
    pub c_n: Option<f64>,
    pub d: Option<f64>,
    pub n_particles: Option<usize>,
    /// Warn when `d < (a + 1) / (2a)`.
    #[serde(default)]
    pub require_rate_optimal: bool,
}

/// Stochastic volatility; vectors are `(φ, σ², β²)`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvSection {
    pub truth: [f64; 3],
    pub theta0: [f64; 3],
}

/// Scalar AR(1) plus noise; vectors are `(φ, σ², γ²)`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LgssmSection {
    #[serde(default)]
    pub init_mean: f64,
    pub init_var: f64,
    pub truth: [f64; 3],
    pub theta0: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteSection {
    pub initial: Vec<f64>,
    pub truth_transition: Vec<Vec<f64>>,
    pub truth_emission: Vec<Vec<f64>>,
    pub theta0_transition: Vec<Vec<f64>>,
    pub theta0_emission: Vec<Vec<f64>>,
}

fn default_q() -> usize {
    15
}
fn default_side() -> f64 {
    45.0
}
fn default_map_seed() -> u64 {
    20_241
}
fn default_radius() -> f64 {
    15.0
}
fn default_dt() -> f64 {
    0.25
}
fn default_wheelbase() -> f64 {
    1.5
}
fn default_speed() -> f64 {
    2.0
}
fn default_margin() -> f64 {
    7.5
}
fn default_init_sd() -> f64 {
    1.0
}
fn default_jitter() -> f64 {
    1e-3
}
fn default_control_noise() -> [f64; 2] {
    let n = ControlNoise::<f64>::default();
    [n.sigma_v, n.sigma_psi]
}
fn default_sensor_noise() -> [f64; 3] {
    let n = SensorNoise::<f64>::default();
    [n.sigma_r, n.sigma_b, n.rho]
}

/// Range-bearing SLAM. Lengths in metres, angles in radians, `dt` in seconds.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlamSection {
    #[serde(default = "default_q")]
    pub q: usize,
    /// Side of the square arena holding the landmarks.
    #[serde(default = "default_side")]
    pub side: f64,
    /// Seed of the true landmark positions, independent of `master_seed`.
    #[serde(default = "default_map_seed")]
    pub map_seed: u64,
    #[serde(default = "default_radius")]
    pub sensing_radius: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_wheelbase")]
    pub wheelbase: f64,
    /// Commanded speed (m/s).
    #[serde(default = "default_speed")]
    pub speed: f64,
    /// Inset of the square loop from the arena border.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Standard deviation of the initial map error around the truth. At 3 m
    /// the 50-particle filter occasionally loses the vehicle.
    #[serde(default = "default_init_sd")]
    pub init_map_sd: f64,
    /// Variance added to each pose coordinate of the filter's transition.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// `(σ_v, σ_ψ)`, shared by the simulator and the filter.
    #[serde(default = "default_control_noise")]
    pub control_noise: [f64; 2],
    /// `(σ_r, σ_b, ρ)` of the simulated sensor.
    #[serde(default = "default_sensor_noise")]
    pub sensor_noise: [f64; 3],
    /// Sensor noise assumed by the filter; defaults to `sensor_noise`.
    pub filter_sensor_noise: Option<[f64; 3]>,
}

/// Particle rules compared by `variance-study`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceSection {
    pub rules: Vec<RuleSpec>,
    /// 1-based parameter coordinate whose variance is reported.
    pub coordinate: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub c: Option<f64>,
    pub d: Option<f64>,
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub schedule: ScheduleSection,
    pub sv: Option<SvSection>,
    pub lgssm: Option<LgssmSection>,
    pub finite: Option<FiniteSection>,
    pub slam: Option<SlamSection>,
    pub variance_study: Option<VarianceSection>,
}

/// 1-based line of `key = ...` inside `[section]`, or of the section header
/// when `key` is empty.
fn locate(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if key.is_empty() && current == section {
                return Some(i + 1);
            }
            continue;
        }
        if current == section && !key.is_empty() {
            if let Some(rest) = line.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

struct Checker<'a> {
    src: &'a str,
    path: Option<&'a Path>,
}

impl Checker<'_> {
    fn err(&self, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            path: self.path.map(Path::to_path_buf),
            line: locate(self.src, section, key).or_else(|| locate(self.src, section, "")),
            message: message.into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: Some(path.to_path_buf()),
            line: None,
            message: format!("cannot read: {e}"),
        })?;
        Self::parse(&src, Some(path))
    }

    pub fn parse_str(src: &str) -> Result<Self, ConfigError> {
        Self::parse(src, None)
    }

    fn parse(src: &str, path: Option<&Path>) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| ConfigError {
            path: path.map(Path::to_path_buf),
            line: e.span().map(|s| line_of(src, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate(&Checker { src, path })?;
        Ok(cfg)
    }

    fn validate(&self, c: &Checker<'_>) -> Result<(), ConfigError> {
        let e = &self.experiment;
        if e.n_replications == 0 {
            return Err(c.err("experiment", "n_replications", "n_replications must be at least 1"));
        }
        if e.n_blocks == 0 {
            return Err(c.err("experiment", "n_blocks", "n_blocks must be at least 1"));
        }
        if e.workers == 0 {
            return Err(c.err("experiment", "workers", "workers must be at least 1"));
        }
        self.schedule()
            .map_err(|m| c.err("schedule", m.0, m.1))?;
        let present = [
            (ModelId::Sv, self.sv.is_some(), "sv"),
            (ModelId::Lgssm, self.lgssm.is_some(), "lgssm"),
            (ModelId::Finite, self.finite.is_some(), "finite"),
            (ModelId::Slam, self.slam.is_some(), "slam"),
        ];
        for (id, there, name) in present {
            if id == e.model && !there {
                return Err(c.err("experiment", "model", format!("model = \"{name}\" needs a [{name}] section")));
            }
        }
        for (id, there, name) in present {
            if id != e.model && there {
                return Err(c.err(name, "", format!("section [{name}] does not match the selected model")));
            }
        }
        if e.e_step == EStep::Exact && !matches!(e.model, ModelId::Lgssm | ModelId::Finite) {
            return Err(c.err("experiment", "e_step", "exact E-step is available for lgssm and finite only"));
        }
        match e.model {
            ModelId::Sv => {
                let s = self.sv.as_ref().expect("checked");
                for (key, v) in [("truth", s.truth), ("theta0", s.theta0)] {
                    if !(v[0].abs() < 1.0 && v[1] > 0.0 && v[2] > 0.0) {
                        return Err(c.err("sv", key, "need |phi| < 1 and positive variances"));
                    }
                }
            }
            ModelId::Lgssm => {
                let s = self.lgssm.as_ref().expect("checked");
                if !(s.init_var >= 0.0) {
                    return Err(c.err("lgssm", "init_var", "init_var must be non-negative"));
                }
                for (key, v) in [("truth", s.truth), ("theta0", s.theta0)] {
                    if !(v[1] > 0.0 && v[2] > 0.0) {
                        return Err(c.err("lgssm", key, "variances must be positive"));
                    }
                }
            }
            ModelId::Finite => {
                let s = self.finite.as_ref().expect("checked");
                let k = s.initial.len();
                let m = s.truth_emission.first().map_or(0, Vec::len);
                let tables = [
                    ("truth_transition", &s.truth_transition, k),
                    ("theta0_transition", &s.theta0_transition, k),
                    ("truth_emission", &s.truth_emission, m),
                    ("theta0_emission", &s.theta0_emission, m),
                ];
                for (key, t, cols) in tables {
                    if t.len() != k || t.iter().any(|r| r.len() != cols) || cols == 0 {
                        return Err(c.err("finite", key, format!("expected a {k}x{cols} table")));
                    }
                }
            }
            ModelId::Slam => {
                let s = self.slam.as_ref().expect("checked");
                if s.q == 0 {
                    return Err(c.err("slam", "q", "q must be at least 1"));
                }
                if Vehicle::new(s.dt, s.wheelbase).is_err() {
                    return Err(c.err("slam", "dt", "dt and wheelbase must be positive"));
                }
                if !(s.side > 2.0 * s.margin && s.margin >= 0.0) {
                    return Err(c.err("slam", "margin", "margin must fit inside the arena"));
                }
                if !(s.init_map_sd >= 0.0) {
                    return Err(c.err("slam", "init_map_sd", "init_map_sd must be non-negative"));
                }
                if self.slam_filter_config().is_err() {
                    let key = if s.filter_sensor_noise.is_some() { "filter_sensor_noise" } else { "sensor_noise" };
                    return Err(c.err(
                        "slam",
                        key,
                        format!(
                            "invalid filter model: {}",
                            self.slam_filter_config().expect_err("checked")
                        ),
                    ));
                }
                let sn = s.sensor_noise;
                if sn[0] < 0.0 || sn[1] < 0.0 || sn[2] * sn[2] > sn[0] * sn[0] * sn[1] * sn[1] {
                    return Err(c.err("slam", "sensor_noise", "sensor covariance must be positive semi-definite"));
                }
            }
        }
        if let Some(v) = &self.variance_study {
            if v.rules.len() < 2 {
                return Err(c.err("variance_study", "rules", "at least two particle rules are needed"));
            }
            for r in &v.rules {
                if let Err(m) = r.rule() {
                    return Err(c.err("variance_study", "rules", m));
                }
            }
            if v.coordinate == 0 || v.coordinate > self.param_dim() {
                return Err(c.err(
                    "variance_study",
                    "coordinate",
                    format!("coordinate must lie in 1..={}", self.param_dim()),
                ));
            }
        }
        Ok(())
    }

    /// The block schedule; on failure, the offending key and a message.
    pub fn schedule(&self) -> Result<BlockSchedule, (&'static str, String)> {
        let s = &self.schedule;
        let rule = RuleSpec { c: s.c_n, d: s.d, n: s.n_particles }
            .rule()
            .map_err(|m| (if s.n_particles.is_some() { "n_particles" } else { "d" }, m))?;
        let key = if s.a > 1.0 { "c_tau" } else { "a" };
        let sched = BlockSchedule::new(s.c_tau, s.a, rule, self.experiment.n_blocks)
            .map_err(|e| (key, e.to_string()))?;
        Ok(if s.require_rate_optimal {
            sched.require_rate_optimal()
        } else {
            sched
        })
    }

    pub fn param_dim(&self) -> usize {
        match self.experiment.model {
            ModelId::Sv | ModelId::Lgssm => 3,
            ModelId::Finite => {
                let f = self.finite.as_ref().expect("validated");
                let k = f.initial.len();
                k * k + k * f.truth_emission.first().map_or(0, Vec::len)
            }
            ModelId::Slam => 2 * self.slam.as_ref().expect("validated").q,
        }
    }

    pub fn block_init(&self) -> BlockInit {
        match self.experiment.block_init {
            BlockInitFlag::Fixed => BlockInit::FixedChi,
            BlockInitFlag::Carry => BlockInit::CarryFilter,
        }
    }

    pub fn slam_filter_config(
        &self,
    ) -> pboem_core::Result<pboem_core::models::slam::SlamModelConfig<f64>> {
        use pboem_core::models::slam::{LoopController, SlamModelConfig};
        let s = self.slam.as_ref().expect("slam section");
        let sn = s.filter_sensor_noise.unwrap_or(s.sensor_noise);
        let cfg = SlamModelConfig {
            vehicle: Vehicle::new(s.dt, s.wheelbase)?,
            control_noise: ControlNoise { sigma_v: s.control_noise[0], sigma_psi: s.control_noise[1] },
            sensor_noise: SensorNoise { sigma_r: sn[0], sigma_b: sn[1], rho: sn[2] },
            jitter: s.jitter,
            start: LoopController::square(s.side, s.margin, s.speed).start_pose(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RuleSpec {
    pub fn rule(&self) -> Result<ParticleRule, String> {
        match (self.c, self.d, self.n) {
            (None, None, Some(n)) if n > 0 => Ok(ParticleRule::Constant(n)),
            (None, None, Some(_)) => Err("constant particle count must be at least 1".into()),
            (c, Some(d), None) => {
                let c = c.unwrap_or(1.0);
                if c > 0.0 && d.is_finite() {
                    Ok(ParticleRule::Power { c, d })
                } else {
                    Err(format!("particle rule needs c > 0 and finite d (c = {c}, d = {d})"))
                }
            }
            (_, None, None) => Err("particle rule needs either d (with optional c) or a constant n".into()),
            _ => Err("give either a power rule (c, d) or a constant count n, not both".into()),
        }
    }
}
