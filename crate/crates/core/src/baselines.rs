//! Safety-margin baselines that sell only ephemeral capacity: a fixed
//! fraction held back, or a margin sized by recent utilization variability.

use serde::{Deserialize, Serialize};

use crate::economics::{CostModel, PenaltySchedule};
use crate::env::{units_from_prediction, EnvConfig, Environment, EpisodeResult};
use crate::error::{Error, Result};
use crate::traces::TraceWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginKind {
    Fixed,
    Scavenger,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginPolicy {
    pub kind: MarginKind,
    #[serde(default = "default_fixed_fraction")]
    pub fixed_fraction: f64,
    #[serde(default = "default_scavenger_k")]
    pub scavenger_k: f64,
    #[serde(default = "default_history_window")]
    pub history_window: usize,
}

fn default_fixed_fraction() -> f64 {
    0.05
}

fn default_scavenger_k() -> f64 {
    1.0
}

fn default_history_window() -> usize {
    480
}

impl MarginPolicy {
    pub fn fixed() -> Self {
        Self {
            kind: MarginKind::Fixed,
            fixed_fraction: default_fixed_fraction(),
            scavenger_k: default_scavenger_k(),
            history_window: default_history_window(),
        }
    }

    pub fn scavenger() -> Self {
        Self {
            kind: MarginKind::Scavenger,
            ..Self::fixed()
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            MarginKind::Fixed => "fixed",
            MarginKind::Scavenger => "scavenger",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fixed_fraction) {
            return Err(Error::validation(format!(
                "fixed_fraction {} is outside [0, 1]",
                self.fixed_fraction
            )));
        }
        if !(self.scavenger_k >= 0.0 && self.scavenger_k.is_finite()) {
            return Err(Error::validation("scavenger_k must be >= 0"));
        }
        if self.history_window < 2 {
            return Err(Error::validation("history_window must be at least 2"));
        }
        Ok(())
    }
}

// Keeps exact products such as 100 * 0.95 from flooring one unit low.
const FLOOR_EPS: f64 = 1e-9;

fn keep_fraction(units: u32, margin: f64) -> u32 {
    (f64::from(units) * (1.0 - margin) + FLOOR_EPS).floor().max(0.0) as u32
}

pub fn allocatable_units_fixed(capacity_units: u32, policy: &MarginPolicy) -> u32 {
    keep_fraction(capacity_units, policy.fixed_fraction)
}

fn sample_std(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    (xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Margin fraction `clamp(k * sigma, 0, 1)`, sigma being the larger sample
/// standard deviation of CPU and memory over the most recent
/// `history_window` points of `(cpu, mem)` utilization.
pub fn scavenger_margin(history: &[(f64, f64)], policy: &MarginPolicy) -> Result<f64> {
    let recent = &history[history.len().saturating_sub(policy.history_window)..];
    if recent.len() < 2 {
        return Err(Error::validation(format!(
            "scavenger needs at least 2 history points, got {}",
            recent.len()
        )));
    }
    let sigma = sample_std(recent.iter().map(|p| p.0)).max(sample_std(recent.iter().map(|p| p.1)));
    Ok((policy.scavenger_k * sigma).clamp(0.0, 1.0))
}

pub fn allocatable_units_scavenger(
    history: &[(f64, f64)],
    free_units: u32,
    policy: &MarginPolicy,
) -> Result<u32> {
    Ok(keep_fraction(free_units, scavenger_margin(history, policy)?))
}

/// Run one day with a margin policy. Each step sells
/// `min(request, allocatable)` ephemeral units; the customer's request is
/// capped at what the policy offers, so violations come only from
/// reclamation. `history` holds earlier `(cpu, mem)` actual utilization and
/// seeds the scavenger window; with fewer than two points the scavenger
/// falls back to the fixed fraction.
pub fn run_baseline_episode(
    policy: &MarginPolicy,
    window: &TraceWindow,
    model: &CostModel,
    env_config: &EnvConfig,
    schedule: &PenaltySchedule,
    history: &[(f64, f64)],
    p: Option<f64>,
    episode: usize,
) -> Result<(EpisodeResult, Environment)> {
    policy.validate()?;
    let env_config = EnvConfig {
        stable_capacity: crate::env::StableCapacity::Units { units: 0 },
        ..*env_config
    };
    let mut env = Environment::new(window.clone(), env_config, *model, p)?;
    let mut history: Vec<(f64, f64)> = history.to_vec();
    while !env.is_done() {
        let t = env.t();
        let free = units_from_prediction(window, t, env_config.unit);
        let allocatable = match policy.kind {
            MarginKind::Fixed => allocatable_units_fixed(free, policy),
            MarginKind::Scavenger => {
                let start = history.len().saturating_sub(policy.history_window);
                if history.len() - start < 2 {
                    allocatable_units_fixed(free, policy)
                } else {
                    allocatable_units_scavenger(&history[start..], free, policy)?
                }
            }
        };
        let target = env.request().min(allocatable);
        env.set_request(target);
        env.set_ephemeral_allocation(target);
        env.advance();
        let s = window.sample(t);
        history.push((s.cpu_used, s.mem_used));
    }
    Ok((env.result(episode, schedule), env))
}
