//! DQN agent: epsilon-greedy selection, uniform experience replay and a
//! periodically synchronised target network.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{NUM_ACTIONS, STATE_DIM};
use crate::error::{Error, Result};
use crate::qnet::{parse_value, CheckpointLines, QNetwork, TrainingConfig};

const CHECKPOINT_MAGIC: &str = "agent v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub state: [f64; STATE_DIM],
    pub action: usize,
    pub reward: f64,
    pub next_state: [f64; STATE_DIM],
    pub terminal: bool,
    /// Whether the transition crossed a time step. Transitions that stay
    /// within a step are discounted with the micro-action factor instead.
    pub advances: bool,
}

impl Experience {
    pub fn validate(&self) -> Result<()> {
        if self.action >= NUM_ACTIONS {
            return Err(Error::validation(format!("action {} out of range", self.action)));
        }
        let finite = self
            .state
            .iter()
            .chain(&self.next_state)
            .chain(std::iter::once(&self.reward))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("experience contains a non-finite value".into()));
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO of experiences.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Experience>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, exp: Experience) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(exp);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Experience> {
        self.items.get(i)
    }

    /// Indices of `n` distinct entries drawn uniformly.
    pub fn sample_indices<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        index::sample(rng, self.items.len(), n.min(self.items.len())).into_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(flatten)]
    pub training: TrainingConfig,
    /// Discount for transitions inside one time step.
    pub micro_gamma: f64,
    pub replay_capacity: usize,
    /// Learn calls between target network syncs; 1 syncs after every call.
    pub target_update: u64,
    pub epsilon_start: f64,
    pub epsilon_decay: f64,
    pub epsilon_min: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            training: TrainingConfig::default(),
            micro_gamma: 0.99,
            replay_capacity: 20_000,
            target_update: 200,
            epsilon_start: 1.0,
            epsilon_decay: 0.995,
            epsilon_min: 0.01,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if !(0.0..=1.0).contains(&self.micro_gamma) {
            return Err(Error::validation("micro_gamma must lie in [0, 1]"));
        }
        if self.replay_capacity == 0 || self.target_update == 0 {
            return Err(Error::validation("replay_capacity and target_update must be positive"));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.epsilon_start) && unit(self.epsilon_decay) && unit(self.epsilon_min)) {
            return Err(Error::validation("epsilon parameters must lie in [0, 1]"));
        }
        if self.epsilon_min > self.epsilon_start {
            return Err(Error::validation("epsilon_min exceeds epsilon_start"));
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Agent {
    online: QNetwork,
    target: QNetwork,
    buffer: ReplayBuffer,
    cfg: AgentConfig,
    epsilon: f64,
    learn_calls: u64,
    rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(cfg: AgentConfig, seed: u64) -> Result<Self> {
        Self::with_network(cfg, QNetwork::new(seed), seed)
    }

    pub fn with_network(cfg: AgentConfig, net: QNetwork, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if net.input_dim() != STATE_DIM || net.output_dim() != NUM_ACTIONS {
            return Err(Error::validation(format!(
                "network shape {:?} does not map {STATE_DIM} inputs to {NUM_ACTIONS} actions",
                net.layer_sizes()
            )));
        }
        let mut agent = Self {
            target: net.clone(),
            online: net,
            buffer: ReplayBuffer::new(cfg.replay_capacity),
            epsilon: cfg.epsilon_start,
            cfg,
            learn_calls: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        // Keep exploration draws independent of the weight-init stream.
        agent.reseed(seed);
        Ok(agent)
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        self.epsilon = epsilon.clamp(0.0, 1.0);
    }

    /// Restart the exploration and sampling stream.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.rng.set_stream(1);
    }

    pub fn learn_calls(&self) -> u64 {
        self.learn_calls
    }

    pub fn network(&self) -> &QNetwork {
        &self.online
    }

    pub fn target_network(&self) -> &QNetwork {
        &self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn q_values(&self, state: &[f64; STATE_DIM]) -> Result<Vec<f64>> {
        self.online.forward(state)
    }

    pub fn greedy_action(&self, state: &[f64; STATE_DIM]) -> Result<usize> {
        Ok(argmax(&self.online.forward(state)?))
    }

    /// Epsilon-greedy choice.
    pub fn select_action(&mut self, state: &[f64; STATE_DIM]) -> Result<usize> {
        if self.rng.gen::<f64>() < self.epsilon {
            Ok(self.rng.gen_range(0..NUM_ACTIONS))
        } else {
            self.greedy_action(state)
        }
    }

    pub fn remember(&mut self, exp: Experience) -> Result<()> {
        exp.validate()?;
        self.buffer.push(exp);
        Ok(())
    }

    /// One replay update. Returns `None` while the buffer holds fewer than
    /// a batch of experiences.
    pub fn learn(&mut self) -> Result<Option<f64>> {
        let batch = self.cfg.training.batch_size;
        if self.buffer.len() < batch {
            return Ok(None);
        }
        let picks = self.buffer.sample_indices(&mut self.rng, batch);
        let mut inputs = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch);
        let mut actions = Vec::with_capacity(batch);
        for i in picks {
            let exp = self.buffer.get(i).expect("sampled index in range");
            let y = if exp.terminal {
                exp.reward
            } else {
                let gamma = if exp.advances {
                    self.cfg.training.gamma
                } else {
                    self.cfg.micro_gamma
                };
                let next = self.target.forward(&exp.next_state)?;
                exp.reward + gamma * next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            inputs.push(exp.state);
            targets.push(y);
            actions.push(exp.action);
        }
        let loss = self
            .online
            .train_batch(&inputs, &targets, &actions, &self.cfg.training)?;
        self.learn_calls += 1;
        if self.learn_calls % self.cfg.target_update == 0 {
            self.target.copy_weights_from(&self.online);
        }
        Ok(Some(loss))
    }

    pub fn decay_epsilon(&mut self) {
        self.epsilon = (self.epsilon * self.cfg.epsilon_decay).max(self.cfg.epsilon_min);
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "epsilon {:?}", self.epsilon)?;
        writeln!(w, "learn_calls {}", self.learn_calls)?;
        writeln!(w, "online")?;
        self.online.write_checkpoint(w)?;
        writeln!(w, "target")?;
        self.target.write_checkpoint(w)
    }

    /// Restore weights and schedule state. The replay buffer is not saved,
    /// so a restored agent reproduces greedy behaviour, not a training run.
    pub fn read_checkpoint<R: BufRead>(r: &mut R, cfg: AgentConfig, seed: u64) -> Result<Self> {
        let mut lines = CheckpointLines::new(r);
        let magic = lines.next_line()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("unknown agent header `{magic}`")));
        }
        let epsilon: f64 = parse_value(&lines.keyed("epsilon")?)?;
        let learn_calls: u64 = parse_value(&lines.keyed("learn_calls")?)?;
        lines.keyed("online")?;
        let online = QNetwork::read_checkpoint(r)?;
        let mut lines = CheckpointLines::new(r);
        lines.keyed("target")?;
        let target = QNetwork::read_checkpoint(r)?;
        if online.layer_sizes() != target.layer_sizes() {
            return Err(Error::Checkpoint("online and target networks differ in shape".into()));
        }
        let mut agent = Self::with_network(cfg, online, seed)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        agent.target = target;
        agent.epsilon = epsilon;
        agent.learn_calls = learn_calls;
        Ok(agent)
    }
}
