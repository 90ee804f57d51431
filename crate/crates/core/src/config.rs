//! Experiment configuration, read from a TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::baselines::{MarginKind, MarginPolicy};
use crate::economics::{CostModel, PenaltySchedule};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::traces::{
    apply_forecaster, generate_synthetic, load_traces, Forecaster, GeneratorProfile, HostSpec,
    TraceWindow, DEFAULT_WINDOW_LEN,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileTraces {
    pub path: PathBuf,
    #[serde(default)]
    pub host: HostSpec,
    #[serde(default = "default_window_len")]
    pub window_len: usize,
    #[serde(default)]
    pub forecaster: Forecaster,
}

fn default_window_len() -> usize {
    DEFAULT_WINDOW_LEN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTraces {
    pub seed: u64,
    pub days: usize,
    pub profile: GeneratorProfile,
    pub forecaster: Forecaster,
}

impl Default for SyntheticTraces {
    fn default() -> Self {
        Self {
            seed: 0,
            days: 10,
            profile: GeneratorProfile::default(),
            forecaster: Forecaster::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TraceSource {
    File(FileTraces),
    Synthetic(SyntheticTraces),
}

impl Default for TraceSource {
    fn default() -> Self {
        TraceSource::Synthetic(SyntheticTraces::default())
    }
}

impl TraceSource {
    pub fn forecaster(&self) -> Forecaster {
        match self {
            TraceSource::File(f) => f.forecaster,
            TraceSource::Synthetic(s) => s.forecaster,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingPlan {
    pub episodes: usize,
    /// Leading share of windows used for training; the rest are for evaluation.
    pub train_fraction: f64,
}

impl Default for TrainingPlan {
    fn default() -> Self {
        Self {
            episodes: 200,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Agent,
    Fixed,
    Scavenger,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Agent => "agent",
            PolicyKind::Fixed => "fixed",
            PolicyKind::Scavenger => "scavenger",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub fixed: MarginPolicy,
    pub scavenger: MarginPolicy,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            fixed: MarginPolicy::fixed(),
            scavenger: MarginPolicy::scavenger(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds network initialisation and all agent randomness.
    pub seed: u64,
    pub traces: TraceSource,
    pub economics: CostModel,
    pub penalty: PenaltySchedule,
    pub environment: EnvConfig,
    pub agent: AgentConfig,
    pub training: TrainingPlan,
    pub baselines: BaselineConfig,
    /// Policies `eval` reports on.
    pub policies: Vec<PolicyKind>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            traces: TraceSource::default(),
            economics: CostModel::default(),
            penalty: PenaltySchedule::default(),
            environment: EnvConfig::default(),
            agent: AgentConfig::default(),
            training: TrainingPlan::default(),
            baselines: BaselineConfig::default(),
            policies: vec![PolicyKind::Agent],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate a config file. A relative trace path is resolved
    /// against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let TraceSource::File(f) = &mut cfg.traces {
            if f.path.is_relative() {
                if let Some(dir) = path.parent() {
                    f.path = dir.join(&f.path);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Validation(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.economics.validate().map_err(wrap)?;
        self.penalty.validate().map_err(wrap)?;
        self.environment.validate().map_err(wrap)?;
        self.agent.validate().map_err(wrap)?;
        self.baselines.fixed.validate().map_err(wrap)?;
        self.baselines.scavenger.validate().map_err(wrap)?;
        if self.baselines.fixed.kind != MarginKind::Fixed
            || self.baselines.scavenger.kind != MarginKind::Scavenger
        {
            return Err(Error::Config("baseline sections must keep their own kind".into()));
        }
        match &self.traces {
            TraceSource::File(f) => {
                f.host.validate().map_err(wrap)?;
                if f.window_len == 0 {
                    return Err(Error::Config("window_len must be positive".into()));
                }
                if !f.path.exists() {
                    return Err(Error::Config(format!(
                        "trace file {} does not exist",
                        f.path.display()
                    )));
                }
            }
            TraceSource::Synthetic(s) => {
                s.profile.validate().map_err(wrap)?;
                if s.days == 0 {
                    return Err(Error::Config("synthetic days must be at least 1".into()));
                }
            }
        }
        if self.training.episodes == 0 {
            return Err(Error::Config("training.episodes must be at least 1".into()));
        }
        if !(self.training.train_fraction > 0.0 && self.training.train_fraction < 1.0) {
            return Err(Error::Config("training.train_fraction must lie in (0, 1)".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("policies must not be empty".into()));
        }
        Ok(())
    }

    /// All windows in chronological order, predictions produced by the
    /// configured forecaster.
    pub fn load_windows(&self) -> Result<Vec<TraceWindow>> {
        let windows = match &self.traces {
            TraceSource::File(f) => load_traces(&f.path, f.host, f.window_len)?,
            TraceSource::Synthetic(s) => generate_synthetic(s.seed, s.days, &s.profile)?,
        };
        if windows.is_empty() {
            return Err(Error::Config("trace source yields no complete window".into()));
        }
        apply_forecaster(&windows, self.traces.forecaster())
    }

    pub fn margin_policy(&self, kind: PolicyKind) -> Option<MarginPolicy> {
        match kind {
            PolicyKind::Agent => None,
            PolicyKind::Fixed => Some(self.baselines.fixed),
            PolicyKind::Scavenger => Some(self.baselines.scavenger),
        }
    }
}
