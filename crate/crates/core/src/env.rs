//! The allocation environment: an ephemeral pool whose size follows the
//! host traces and a fixed stable pool, driven by micro-actions inside each
//! time step.
//!
//! Availability shown to the decision maker comes from predicted
//! utilization. When a step is settled, the ephemeral pool shrinks to the
//! capacity left by the actual utilization and any allocation above that is
//! lost.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::economics::{daily_profit, step_reward, CostModel, DailyLedger, PenaltySchedule};
use crate::error::{Error, Result};
use crate::traces::{HostSpec, TraceWindow};

pub const DEFAULT_K_MAX: usize = 32;
pub const STATE_DIM: usize = 6;
pub const NUM_ACTIONS: usize = 5;

/// Allocation granule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceUnit {
    pub vcpu: u32,
    pub mem_gb: u32,
}

impl Default for ResourceUnit {
    fn default() -> Self {
        Self { vcpu: 2, mem_gb: 8 }
    }
}

impl ResourceUnit {
    pub fn validate(&self) -> Result<()> {
        if self.vcpu == 0 || self.mem_gb == 0 {
            return Err(Error::validation("resource unit dimensions must be positive"));
        }
        Ok(())
    }
}

// Guards floor() against results like 5.999999999 for exact unit counts.
const FLOOR_EPS: f64 = 1e-9;

/// Whole units that fit in the capacity left free at the given utilization.
pub fn free_units(host: HostSpec, cpu_util: f64, mem_util: f64, unit: ResourceUnit) -> u32 {
    let free_cpu = f64::from(host.cpu_cores) * (1.0 - cpu_util);
    let free_mem = f64::from(host.mem_gb) * (1.0 - mem_util);
    let units = (free_cpu / f64::from(unit.vcpu)).min(free_mem / f64::from(unit.mem_gb));
    (units + FLOOR_EPS).floor().max(0.0) as u32
}

/// Ephemeral units the forecast says are free at step `t`.
pub fn units_from_prediction(window: &TraceWindow, t: usize, unit: ResourceUnit) -> u32 {
    let s = window.sample(t);
    free_units(window.host, s.cpu_pred, s.mem_pred, unit)
}

/// Ephemeral units actually free at step `t`.
pub fn units_from_actual(window: &TraceWindow, t: usize, unit: ResourceUnit) -> u32 {
    let s = window.sample(t);
    free_units(window.host, s.cpu_used, s.mem_used, unit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    AllocEphemeral,
    RemoveEphemeral,
    AllocStable,
    RemoveStable,
    Noop,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::AllocEphemeral,
        Action::RemoveEphemeral,
        Action::AllocStable,
        Action::RemoveStable,
        Action::Noop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Action::AllocEphemeral => "alloc_e",
            Action::RemoveEphemeral => "remove_e",
            Action::AllocStable => "alloc_s",
            Action::RemoveStable => "remove_s",
            Action::Noop => "noop",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnvState {
    pub res_rem: u32,
    pub res_alloc_e: u32,
    pub res_alloc_s: u32,
    pub res_avail_e: u32,
    pub res_avail_s: u32,
    pub p: f64,
}

impl EnvState {
    pub fn allocated(&self) -> u32 {
        self.res_alloc_e + self.res_alloc_s
    }
}

/// How many units the ephemeral customer asks for at each step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RequestPolicy {
    /// Everything the forecast reports free at the current step.
    #[default]
    AllAvailable,
    /// What the forecast reports free at the first step, held for the day.
    AtStart,
    Fixed { units: u32 },
    /// Independent Poisson draws per step from a stream seeded per episode.
    Poisson { mean: f64, seed: u64 },
}

impl RequestPolicy {
    pub fn validate(&self) -> Result<()> {
        if let RequestPolicy::Poisson { mean, .. } = self {
            if !(*mean > 0.0 && mean.is_finite()) {
                return Err(Error::validation(format!("poisson mean {mean} must be positive")));
            }
        }
        Ok(())
    }
}

/// Size of the stable pool for an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StableCapacity {
    /// Fraction of the peak predicted ephemeral capacity of the window.
    FractionOfPeak { fraction: f64 },
    Units { units: u32 },
}

impl Default for StableCapacity {
    fn default() -> Self {
        StableCapacity::FractionOfPeak { fraction: 0.25 }
    }
}

impl StableCapacity {
    pub fn validate(&self) -> Result<()> {
        if let StableCapacity::FractionOfPeak { fraction } = self {
            if !(0.0..=1.0).contains(fraction) {
                return Err(Error::validation(format!(
                    "stable fraction {fraction} is outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, window: &TraceWindow, unit: ResourceUnit) -> u32 {
        match *self {
            StableCapacity::FractionOfPeak { fraction } => {
                (fraction * f64::from(peak_predicted_units(window, unit)) + FLOOR_EPS).floor() as u32
            }
            StableCapacity::Units { units } => units,
        }
    }
}

pub fn peak_predicted_units(window: &TraceWindow, unit: ResourceUnit) -> u32 {
    (0..window.len())
        .map(|t| units_from_prediction(window, t, unit))
        .max()
        .unwrap_or(0)
}

/// Initial state of an episode. `request` is the customer's demand at step 0.
pub fn reset(window: &TraceWindow, stable_capacity: u32, request: u32, p: f64, unit: ResourceUnit) -> EnvState {
    EnvState {
        res_rem: request,
        res_alloc_e: 0,
        res_alloc_s: 0,
        res_avail_e: units_from_prediction(window, 0, unit),
        res_avail_s: stable_capacity,
        p,
    }
}

fn shortfall(request: u32, state: &EnvState) -> u32 {
    request.saturating_sub(state.allocated())
}

/// Apply one micro-action. Invalid actions leave the state unchanged.
/// Removing a unit only re-opens demand when the allocation drops below
/// `request`; over-allocated surplus is not owed to the customer.
pub fn apply_action(state: &EnvState, a: Action, request: u32) -> EnvState {
    let mut s = *state;
    match a {
        Action::AllocEphemeral if s.res_avail_e > 0 => {
            s.res_avail_e -= 1;
            s.res_alloc_e += 1;
            s.res_rem = s.res_rem.saturating_sub(1);
        }
        Action::AllocStable if s.res_avail_s > 0 => {
            s.res_avail_s -= 1;
            s.res_alloc_s += 1;
            s.res_rem = s.res_rem.saturating_sub(1);
        }
        Action::RemoveEphemeral if s.res_alloc_e > 0 => {
            s.res_alloc_e -= 1;
            s.res_avail_e += 1;
            s.res_rem = shortfall(request, &s);
        }
        Action::RemoveStable if s.res_alloc_s > 0 => {
            s.res_alloc_s -= 1;
            s.res_avail_s += 1;
            s.res_rem = shortfall(request, &s);
        }
        _ => {}
    }
    s
}

/// Something that picks micro-actions from the current state.
pub trait DecisionSource {
    fn decide(&mut self, state: &EnvState) -> Action;
}

impl<F: FnMut(&EnvState) -> Action> DecisionSource for F {
    fn decide(&mut self, state: &EnvState) -> Action {
        self(state)
    }
}

/// Query `agent` until it answers Noop or `k_max` actions have been taken.
/// Returns the actions taken and the resulting state.
pub fn decide_step<D: DecisionSource + ?Sized>(
    state: &EnvState,
    agent: &mut D,
    k_max: usize,
    request: u32,
) -> (Vec<Action>, EnvState) {
    let mut s = *state;
    let mut actions = Vec::new();
    while actions.len() < k_max {
        let a = agent.decide(&s);
        actions.push(a);
        if a == Action::Noop {
            break;
        }
        s = apply_action(&s, a, request);
    }
    (actions, s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// State after reclamation at the settled step.
    pub next_state: EnvState,
    pub reward: f64,
    pub lost_units: u32,
    pub violated: bool,
    pub terminal: bool,
}

/// Settle step `t` against actual utilization: evict ephemeral units above
/// the actual capacity, refresh availability and score the step.
pub fn advance_time(
    state: &EnvState,
    window: &TraceWindow,
    t: usize,
    request: u32,
    model: &CostModel,
    unit: ResourceUnit,
) -> StepOutcome {
    let capacity = units_from_actual(window, t, unit);
    let mut s = *state;
    let lost_units = s.res_alloc_e.saturating_sub(capacity);
    s.res_alloc_e -= lost_units;
    s.res_avail_e = capacity - s.res_alloc_e;
    s.res_rem = shortfall(request, &s);
    StepOutcome {
        next_state: s,
        reward: step_reward(s.res_alloc_e, s.res_alloc_s, s.res_rem, model),
        lost_units,
        violated: s.res_rem > 0,
        terminal: t + 1 >= window.len(),
    }
}

/// Encode a state for the Q-network: counts relative to pool capacity,
/// demand relative to both pools together, `p` unchanged.
pub fn encode_state(state: &EnvState, e_capacity: u32, s_capacity: u32) -> [f64; STATE_DIM] {
    let ratio = |n: u32, cap: u32| if cap == 0 { 0.0 } else { f64::from(n) / f64::from(cap) };
    [
        ratio(state.res_rem, e_capacity + s_capacity),
        ratio(state.res_alloc_e, e_capacity),
        ratio(state.res_alloc_s, s_capacity),
        ratio(state.res_avail_e, e_capacity),
        ratio(state.res_avail_s, s_capacity),
        state.p,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub unit: ResourceUnit,
    pub stable_capacity: StableCapacity,
    pub request_policy: RequestPolicy,
    pub k_max: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            unit: ResourceUnit::default(),
            stable_capacity: StableCapacity::default(),
            request_policy: RequestPolicy::default(),
            k_max: DEFAULT_K_MAX,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.unit.validate()?;
        self.stable_capacity.validate()?;
        self.request_policy.validate()?;
        if self.k_max == 0 {
            return Err(Error::validation("k_max must be at least 1"));
        }
        Ok(())
    }
}

/// One row of the episode event log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub actions: String,
    pub rem: u32,
    pub alloc_e: u32,
    pub alloc_s: u32,
    pub lost_units: u32,
    pub reward: f64,
    pub violated: bool,
}

/// Per-episode metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub total_reward: f64,
    pub ledger: DailyLedger,
    pub profit: f64,
    pub lost_units: u64,
    pub stable_pct: f64,
}

/// Stateful episode runner over one window.
#[derive(Debug, Clone)]
pub struct Environment {
    window: TraceWindow,
    config: EnvConfig,
    model: CostModel,
    stable_capacity: u32,
    e_capacity: u32,
    t: usize,
    request: u32,
    state: EnvState,
    micro_actions: Vec<Action>,
    done: bool,
    rng: Option<ChaCha8Rng>,
    log: Vec<StepRecord>,
    total_reward: f64,
    lost_units: u64,
    alloc_e_steps: u64,
    alloc_s_steps: u64,
    violation_steps: u64,
}

impl Environment {
    /// Start an episode on `window`. `p` is the volatility estimate carried
    /// into the window; pass `None` when there is no earlier window.
    pub fn new(window: TraceWindow, config: EnvConfig, model: CostModel, p: Option<f64>) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let p = p.unwrap_or(1.0);
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::validation(format!("volatility {p} is outside [0, 1]")));
        }
        let stable_capacity = config.stable_capacity.resolve(&window, config.unit);
        let e_capacity = peak_predicted_units(&window, config.unit);
        let rng = match config.request_policy {
            RequestPolicy::Poisson { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        let mut env = Self {
            window,
            config,
            model,
            stable_capacity,
            e_capacity,
            t: 0,
            request: 0,
            state: EnvState::default(),
            micro_actions: Vec::new(),
            done: false,
            rng,
            log: Vec::new(),
            total_reward: 0.0,
            lost_units: 0,
            alloc_e_steps: 0,
            alloc_s_steps: 0,
            violation_steps: 0,
        };
        let request = env.draw_request(0);
        env.request = request;
        env.state = reset(&env.window, stable_capacity, request, p, config.unit);
        Ok(env)
    }

    fn draw_request(&mut self, t: usize) -> u32 {
        let unit = self.config.unit;
        match self.config.request_policy {
            RequestPolicy::AllAvailable => units_from_prediction(&self.window, t, unit),
            RequestPolicy::AtStart => units_from_prediction(&self.window, 0, unit),
            RequestPolicy::Fixed { units } => units,
            RequestPolicy::Poisson { mean, .. } => {
                let rng = self.rng.as_mut().expect("poisson stream initialised");
                let d = Poisson::new(mean).expect("validated mean");
                d.sample(rng) as u32
            }
        }
    }

    pub fn window(&self) -> &TraceWindow {
        &self.window
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn request(&self) -> u32 {
        self.request
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn stable_capacity(&self) -> u32 {
        self.stable_capacity
    }

    /// Normaliser for ephemeral counts: the window's peak predicted capacity.
    pub fn e_capacity(&self) -> u32 {
        self.e_capacity
    }

    pub fn k_max(&self) -> usize {
        self.config.k_max
    }

    pub fn model(&self) -> &CostModel {
        &self.model
    }

    pub fn observation(&self) -> [f64; STATE_DIM] {
        encode_state(&self.state, self.e_capacity, self.stable_capacity)
    }

    /// Micro-actions taken so far in the current step.
    pub fn micro_actions(&self) -> &[Action] {
        &self.micro_actions
    }

    /// True when the next micro-action must end the step.
    pub fn at_action_cap(&self) -> bool {
        self.micro_actions.len() + 1 >= self.config.k_max
    }

    /// Apply a micro-action within the current step.
    pub fn apply(&mut self, a: Action) {
        debug_assert!(!self.done);
        self.micro_actions.push(a);
        self.state = apply_action(&self.state, a, self.request);
    }

    /// Run one full step: query `agent` for micro-actions, then settle.
    pub fn step_with<D: DecisionSource + ?Sized>(&mut self, agent: &mut D) -> StepOutcome {
        let (actions, s) = decide_step(&self.state, agent, self.config.k_max, self.request);
        self.micro_actions.extend(actions);
        self.state = s;
        self.advance()
    }

    /// Directly set the ephemeral allocation, bypassing the micro-action
    /// cap. Clamped to what is available this step.
    pub fn set_ephemeral_allocation(&mut self, units: u32) {
        let pool = self.state.res_alloc_e + self.state.res_avail_e;
        let units = units.min(pool);
        self.state.res_alloc_e = units;
        self.state.res_avail_e = pool - units;
        self.state.res_rem = shortfall(self.request, &self.state);
    }

    /// Override the current step's request.
    pub fn set_request(&mut self, request: u32) {
        self.request = request;
        self.state.res_rem = shortfall(request, &self.state);
    }

    /// Settle the current step and open the next one.
    pub fn advance(&mut self) -> StepOutcome {
        assert!(!self.done, "episode already finished");
        let out = advance_time(&self.state, &self.window, self.t, self.request, &self.model, self.config.unit);
        let s = out.next_state;
        self.total_reward += out.reward;
        self.lost_units += u64::from(out.lost_units);
        self.alloc_e_steps += u64::from(s.res_alloc_e);
        self.alloc_s_steps += u64::from(s.res_alloc_s);
        self.violation_steps += u64::from(out.violated);
        let actions = self
            .micro_actions
            .iter()
            .map(|a| a.index().to_string())
            .collect::<Vec<_>>()
            .join(";");
        self.log.push(StepRecord {
            t: self.t,
            actions,
            rem: s.res_rem,
            alloc_e: s.res_alloc_e,
            alloc_s: s.res_alloc_s,
            lost_units: out.lost_units,
            reward: out.reward,
            violated: out.violated,
        });
        self.micro_actions.clear();
        self.state = s;
        if out.terminal {
            self.done = true;
        } else {
            self.t += 1;
            let predicted = units_from_prediction(&self.window, self.t, self.config.unit);
            self.state.res_avail_e = predicted.saturating_sub(self.state.res_alloc_e);
            self.request = self.draw_request(self.t);
            self.state.res_rem = shortfall(self.request, &self.state);
        }
        out
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn total_reward(&self) -> f64 {
        self.total_reward
    }

    pub fn ledger(&self) -> DailyLedger {
        let h = self.model.step_hours();
        DailyLedger {
            ephemeral_unit_hours: self.alloc_e_steps as f64 * h,
            stable_unit_hours: self.alloc_s_steps as f64 * h,
            violation_minutes: self.violation_steps as f64 * self.model.step_minutes,
        }
    }

    pub fn result(&self, episode: usize, schedule: &PenaltySchedule) -> EpisodeResult {
        let ledger = self.ledger();
        let total = self.alloc_e_steps + self.alloc_s_steps;
        EpisodeResult {
            episode,
            total_reward: self.total_reward,
            ledger,
            profit: daily_profit(&ledger, &self.model, schedule),
            lost_units: self.lost_units,
            stable_pct: if total == 0 {
                0.0
            } else {
                self.alloc_s_steps as f64 / total as f64
            },
        }
    }
}
