//! Experiment orchestration: train the agent on the leading windows,
//! evaluate policies on the rest, and write reports.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::agent::{Agent, Experience};
use crate::baselines::run_baseline_episode;
use crate::config::{ExperimentConfig, PolicyKind};
use crate::env::{Action, Environment, EpisodeResult, StepRecord};
use crate::error::{Error, Result};
use crate::traces::TraceWindow;
use crate::volatility::estimate_volatility;

pub const CHECKPOINT_FILE: &str = "agent.ckpt";
pub const LEARNING_CURVE_FILE: &str = "learning_curve.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub test: Range<usize>,
}

/// Chronological split: the first `floor(n * fraction)` windows train,
/// the remainder test. Both parts are kept non-empty.
pub fn split_windows(n: usize, train_fraction: f64) -> Result<Split> {
    if n < 2 {
        return Err(Error::Config(format!(
            "need at least 2 windows to split into train and test, have {n}"
        )));
    }
    let train = ((n as f64 * train_fraction + 1e-9).floor() as usize).clamp(1, n - 1);
    Ok(Split {
        train: 0..train,
        test: train..n,
    })
}

/// Volatility carried into window `i`: the estimate from window `i - 1`.
pub fn prior_volatility(windows: &[TraceWindow], i: usize) -> Result<Option<f64>> {
    match i.checked_sub(1) {
        Some(prev) => Ok(Some(estimate_volatility(&windows[prev])?.p_hat)),
        None => Ok(None),
    }
}

/// Actual `(cpu, mem)` utilization of the window before `i`.
pub fn history_before(windows: &[TraceWindow], i: usize) -> Vec<(f64, f64)> {
    i.checked_sub(1)
        .map(|prev| {
            windows[prev]
                .samples()
                .iter()
                .map(|s| (s.cpu_used, s.mem_used))
                .collect()
        })
        .unwrap_or_default()
}

fn open_env(cfg: &ExperimentConfig, windows: &[TraceWindow], i: usize) -> Result<Environment> {
    Environment::new(
        windows[i].clone(),
        cfg.environment,
        cfg.economics,
        prior_volatility(windows, i)?,
    )
}

/// Drive `env` to the end of its window with `agent`. When `learn` is set,
/// every micro-action is stored and followed by one replay update. Returns
/// the mean replay loss, if any update ran.
///
/// Micro-actions that do not end the step earn nothing; the action that
/// ends it (Noop, or whatever hits the cap) earns the step's reward, and
/// its successor is the first state of the next step.
pub fn run_agent_episode(agent: &mut Agent, env: &mut Environment, learn: bool) -> Result<Option<f64>> {
    let mut obs = env.observation();
    let (mut loss_sum, mut updates) = (0.0, 0usize);
    while !env.is_done() {
        let a = agent.select_action(&obs)?;
        let action = Action::from_index(a).expect("agent returns a valid index");
        let ends_step = action == Action::Noop || env.at_action_cap();
        env.apply(action);
        let (reward, terminal) = if ends_step {
            let out = env.advance();
            (out.reward, out.terminal)
        } else {
            (0.0, false)
        };
        let next = env.observation();
        if learn {
            agent.remember(Experience {
                state: obs,
                action: a,
                reward,
                next_state: next,
                terminal,
                advances: ends_step,
            })?;
            if let Some(loss) = agent.learn()? {
                loss_sum += loss;
                updates += 1;
            }
        }
        obs = next;
    }
    Ok((updates > 0).then(|| loss_sum / updates as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingRecord {
    pub episode: usize,
    pub window: usize,
    pub epsilon: f64,
    pub total_reward: f64,
    pub profit: f64,
    pub violation_min: f64,
    pub ephem_unit_hours: f64,
    pub stable_pct: f64,
    pub lost_units: u64,
    pub mean_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub agent: Agent,
    pub curve: Vec<TrainingRecord>,
    pub split: Split,
}

/// Train one agent, cycling through the training windows in order and
/// decaying epsilon after every episode.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let windows = cfg.load_windows()?;
    let split = split_windows(windows.len(), cfg.training.train_fraction)?;
    let mut agent = Agent::new(cfg.agent, cfg.seed)?;
    let mut curve = Vec::with_capacity(cfg.training.episodes);
    for episode in 0..cfg.training.episodes {
        let w = split.train.start + episode % split.train.len();
        let mut env = open_env(cfg, &windows, w)?;
        let epsilon = agent.epsilon();
        let mean_loss = run_agent_episode(&mut agent, &mut env, true)?;
        agent.decay_epsilon();
        let r = env.result(episode, &cfg.penalty);
        curve.push(TrainingRecord {
            episode,
            window: w,
            epsilon,
            total_reward: r.total_reward,
            profit: r.profit,
            violation_min: r.ledger.violation_minutes,
            ephem_unit_hours: r.ledger.ephemeral_unit_hours,
            stable_pct: r.stable_pct,
            lost_units: r.lost_units,
            mean_loss,
        });
    }
    Ok(TrainingOutcome {
        agent,
        curve,
        split,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(xs: impl IntoIterator<Item = f64>) -> Self {
        let (mut sum, mut n) = (0.0, 0usize);
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in xs {
            sum += x;
            n += 1;
            min = min.min(x);
            max = max.max(x);
        }
        if n == 0 {
            return Self { mean: 0.0, min: 0.0, max: 0.0 };
        }
        Self {
            mean: sum / n as f64,
            min,
            max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub days: usize,
    pub total_profit: f64,
    pub profit: Stats,
    pub violation_min: Stats,
    pub ephem_unit_hours: Stats,
    pub stable_pct: Stats,
}

impl Summary {
    pub fn of(results: &[EpisodeResult]) -> Self {
        Self {
            days: results.len(),
            total_profit: results.iter().map(|r| r.profit).sum(),
            profit: Stats::of(results.iter().map(|r| r.profit)),
            violation_min: Stats::of(results.iter().map(|r| r.ledger.violation_minutes)),
            ephem_unit_hours: Stats::of(results.iter().map(|r| r.ledger.ephemeral_unit_hours)),
            stable_pct: Stats::of(results.iter().map(|r| r.stable_pct)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    pub policy: PolicyKind,
    /// Index of the window each result was measured on.
    pub windows: Vec<usize>,
    pub results: Vec<EpisodeResult>,
    pub logs: Vec<Vec<StepRecord>>,
    pub summary: Summary,
}

/// Run one policy over the test windows. The agent acts epsilon-greedily
/// with its configured minimum epsilon and a stream reseeded from the
/// config seed, so repeated evaluations agree exactly.
pub fn evaluate_policy(
    cfg: &ExperimentConfig,
    windows: &[TraceWindow],
    test: Range<usize>,
    policy: PolicyKind,
    agent: Option<&Agent>,
) -> Result<PolicyEvaluation> {
    let mut results = Vec::with_capacity(test.len());
    let mut logs = Vec::with_capacity(test.len());
    let mut eval_agent = match policy {
        PolicyKind::Agent => {
            let mut a = agent
                .ok_or_else(|| Error::Config("agent policy requires a checkpoint".into()))?
                .clone();
            a.set_epsilon(cfg.agent.epsilon_min);
            a.reseed(cfg.seed);
            Some(a)
        }
        _ => None,
    };
    for (day, w) in test.clone().enumerate() {
        let env = match (&mut eval_agent, cfg.margin_policy(policy)) {
            (Some(agent), _) => {
                let mut env = open_env(cfg, windows, w)?;
                run_agent_episode(agent, &mut env, false)?;
                env
            }
            (None, Some(margin)) => {
                run_baseline_episode(
                    &margin,
                    &windows[w],
                    &cfg.economics,
                    &cfg.environment,
                    &cfg.penalty,
                    &history_before(windows, w),
                    prior_volatility(windows, w)?,
                    day,
                )?
                .1
            }
            (None, None) => unreachable!("every non-agent policy has a margin"),
        };
        results.push(env.result(day, &cfg.penalty));
        logs.push(env.log().to_vec());
    }
    Ok(PolicyEvaluation {
        policy,
        windows: test.collect(),
        summary: Summary::of(&results),
        results,
        logs,
    })
}

fn test_windows(cfg: &ExperimentConfig) -> Result<(Vec<TraceWindow>, Range<usize>)> {
    cfg.validate()?;
    let windows = cfg.load_windows()?;
    let split = split_windows(windows.len(), cfg.training.train_fraction)?;
    Ok((windows, split.test))
}

/// Evaluate every policy listed in the config on the test windows.
pub fn run_evaluation(cfg: &ExperimentConfig, agent: Option<&Agent>) -> Result<Vec<PolicyEvaluation>> {
    let (windows, test) = test_windows(cfg)?;
    cfg.policies
        .iter()
        .map(|&p| evaluate_policy(cfg, &windows, test.clone(), p, agent))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub profit: f64,
    pub violation_min: f64,
    pub ephem_unit_hours: f64,
    pub stable_pct: f64,
}

impl ComparisonRow {
    fn from_summary(policy: PolicyKind, s: &Summary) -> Self {
        Self {
            policy: policy.name().to_string(),
            profit: s.profit.mean,
            violation_min: s.violation_min.mean,
            ephem_unit_hours: s.ephem_unit_hours.mean,
            stable_pct: s.stable_pct.mean,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub evaluations: Vec<PolicyEvaluation>,
}

impl Comparison {
    pub fn row(&self, policy: PolicyKind) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.policy == policy.name())
    }
}

/// Agent, Fixed and Scavenger on the same test windows. Rows hold per-day means.
pub fn run_comparison(cfg: &ExperimentConfig, agent: &Agent) -> Result<Comparison> {
    let (windows, test) = test_windows(cfg)?;
    let evaluations = [PolicyKind::Agent, PolicyKind::Fixed, PolicyKind::Scavenger]
        .into_iter()
        .map(|p| evaluate_policy(cfg, &windows, test.clone(), p, Some(agent)))
        .collect::<Result<Vec<_>>>()?;
    let rows = evaluations
        .iter()
        .map(|e| ComparisonRow::from_summary(e.policy, &e.summary))
        .collect();
    Ok(Comparison { rows, evaluations })
}

pub fn load_agent(cfg: &ExperimentConfig, path: impl AsRef<Path>) -> Result<Agent> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Agent::read_checkpoint(&mut BufReader::new(file), cfg.agent, cfg.seed)
}

pub fn save_agent(agent: &Agent, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    agent.write_checkpoint(&mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct EpisodeRow {
    day: usize,
    window: usize,
    total_reward: f64,
    profit: f64,
    violation_min: f64,
    ephem_unit_hours: f64,
    stable_unit_hours: f64,
    stable_pct: f64,
    lost_units: u64,
}

fn episode_rows(e: &PolicyEvaluation) -> Vec<EpisodeRow> {
    e.results
        .iter()
        .zip(&e.windows)
        .map(|(r, &w)| EpisodeRow {
            day: r.episode,
            window: w,
            total_reward: r.total_reward,
            profit: r.profit,
            violation_min: r.ledger.violation_minutes,
            ephem_unit_hours: r.ledger.ephemeral_unit_hours,
            stable_unit_hours: r.ledger.stable_unit_hours,
            stable_pct: r.stable_pct,
            lost_units: r.lost_units,
        })
        .collect()
}

fn summary_text(evaluations: &[PolicyEvaluation]) -> String {
    let mut out = String::new();
    for e in evaluations {
        let s = &e.summary;
        out.push_str(&format!("policy {} over {} days\n", e.policy.name(), s.days));
        out.push_str(&format!("  total profit      {:.4}\n", s.total_profit));
        for (name, st) in [
            ("profit/day", s.profit),
            ("violation min", s.violation_min),
            ("ephem unit-hours", s.ephem_unit_hours),
            ("stable pct", s.stable_pct),
        ] {
            out.push_str(&format!(
                "  {name:<17} mean {:.4}  min {:.4}  max {:.4}\n",
                st.mean, st.min, st.max
            ));
        }
    }
    out
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write per-day results, per-step event logs and a text summary for each
/// evaluated policy into `dir`.
pub fn write_evaluations(dir: &Path, evaluations: &[PolicyEvaluation]) -> Result<()> {
    ensure_dir(dir)?;
    for e in evaluations {
        let name = e.policy.name();
        write_csv(&dir.join(format!("{name}_days.csv")), &episode_rows(e))?;
        let events = dir.join("events").join(name);
        ensure_dir(&events)?;
        for (log, r) in e.logs.iter().zip(&e.results) {
            write_csv(&events.join(format!("day_{:03}.csv", r.episode)), log)?;
        }
    }
    let path = dir.join("summary.txt");
    fs::write(&path, summary_text(evaluations)).map_err(|e| Error::io(&path, e))
}

/// `train` command: writes the checkpoint and the learning curve.
pub fn train_to_dir(cfg: &ExperimentConfig, out: &Path) -> Result<(TrainingOutcome, PathBuf)> {
    let outcome = run_training(cfg)?;
    ensure_dir(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_agent(&outcome.agent, &ckpt)?;
    write_csv(&out.join(LEARNING_CURVE_FILE), &outcome.curve)?;
    Ok((outcome, ckpt))
}

/// `eval` command.
pub fn eval_to_dir(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: &Path) -> Result<Vec<PolicyEvaluation>> {
    cfg.validate()?;
    let agent = checkpoint.map(|p| load_agent(cfg, p)).transpose()?;
    let evaluations = run_evaluation(cfg, agent.as_ref())?;
    write_evaluations(out, &evaluations)?;
    Ok(evaluations)
}

/// `compare` command.
pub fn compare_to_dir(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<Comparison> {
    cfg.validate()?;
    let agent = load_agent(cfg, checkpoint)?;
    let comparison = run_comparison(cfg, &agent)?;
    write_evaluations(out, &comparison.evaluations)?;
    write_csv(&out.join(COMPARISON_FILE), &comparison.rows)?;
    Ok(comparison)
}
