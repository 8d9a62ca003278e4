//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 0
//!
//! [schedule]
//! steps = 1000
//! beta_start = 1e-4
//! beta_end = 0.02
//!
//! [data]
//! count = 16
//! size = 64
//! n_ellipses = 6
//! dose_fractions = [0.25, 0.1]
//! photon_budget = 4096.0
//!
//! [run]
//! predictor = "conditioned"        # conditioned | unconditional | affine
//! samplers = ["ddpm", "ddim", "dpm1", "dpm2", "dpmpp", "unipc"]
//! regimes = ["full", "ast", "inverted"]
//! origins = [10, 25, 50, 100, 150, 500, 1000]
//! eta = 0.0
//! grid = "uniform"
//! inversion = "predicted_x0"       # or literal_x0
//! trajectory_steps = 150           # optional; one recorded trajectory per curve
//! ```
//!
//! Every key is optional; omitted keys take the values shown. Unknown keys
//! and unknown sampler or regime names are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::astn::RegimeName;
use crate::data::DEFAULT_PHOTON_BUDGET;
use crate::denoiser::SgdConfig;
use crate::error::{Error, Result};
use crate::inversion::InversionMode;
use crate::samplers::SamplerKind;
use crate::schedule::{GridStrategy, NoiseSchedule};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of phantoms; each yields one pair per dose fraction.
    pub count: usize,
    pub size: usize,
    pub n_ellipses: usize,
    pub dose_fractions: Vec<f64>,
    pub photon_budget: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    /// Gaussian posterior oracle conditioned on the low-dose image.
    #[default]
    Conditioned,
    /// Gaussian oracle that ignores the condition.
    Unconditional,
    /// Per-timestep affine model, trained or loaded from `affine_path`.
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub predictor: PredictorKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub affine_path: Option<PathBuf>,
    pub sgd: SgdConfig,
    pub samplers: Vec<SamplerKind>,
    pub regimes: Vec<RegimeName>,
    pub origins: Vec<usize>,
    pub eta: f64,
    pub grid: GridStrategy,
    pub inversion: InversionMode,
    /// Restrict the run to pairs with this dose fraction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dose_fraction: Option<f64>,
    /// Use at most this many pairs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_images: Option<usize>,
    /// Step count at which one trajectory per (regime, sampler) is recorded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory_steps: Option<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 16,
            size: 64,
            n_ellipses: 6,
            dose_fractions: vec![0.25, 0.1],
            photon_budget: DEFAULT_PHOTON_BUDGET,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            predictor: PredictorKind::Conditioned,
            affine_path: None,
            sgd: SgdConfig {
                iterations: 20_000,
                ..SgdConfig::default()
            },
            samplers: SamplerKind::ALL.to_vec(),
            regimes: vec![RegimeName::Full, RegimeName::Ast, RegimeName::Inverted],
            origins: vec![10, 25, 50, 100, 150, 500, 1000],
            eta: 0.0,
            grid: GridStrategy::Uniform,
            inversion: InversionMode::PredictedX0,
            dose_fraction: None,
            max_images: None,
            trajectory_steps: Some(150),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.steps, s.beta_start, s.beta_end)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        let d = &self.data;
        if d.size < 32 {
            return Err(Error::Config(format!(
                "data.size must be >= 32, got {}",
                d.size
            )));
        }
        if let Some(f) = d.dose_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("dose fraction {f} outside (0, 1]")));
        }
        if !(d.photon_budget > 0.0) {
            return Err(Error::Config(format!(
                "photon_budget must be positive, got {}",
                d.photon_budget
            )));
        }
        let r = &self.run;
        if let Some(&o) = r
            .origins
            .iter()
            .find(|&&o| o == 0 || o > self.schedule.steps)
        {
            return Err(Error::Config(format!(
                "origin/budget {o} outside [1, {}]",
                self.schedule.steps
            )));
        }
        if !(r.eta >= 0.0 && r.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be >= 0, got {}", r.eta)));
        }
        Ok(())
    }
}
