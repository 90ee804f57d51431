//! Feed-forward Q-value network with hand-written backpropagation.
//!
//! Hidden layers use ReLU, the output layer is linear. Training regresses
//! only the output of the taken action towards its target (masked MSE).

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{NUM_ACTIONS, STATE_DIM};
use crate::error::{Error, Result};

pub const HIDDEN_WIDTH: usize = 24;
pub const DEFAULT_LAYERS: [usize; 4] = [STATE_DIM, HIDDEN_WIDTH, HIDDEN_WIDTH, NUM_ACTIONS];
const CHECKPOINT_MAGIC: &str = "qnetwork v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Sgd
    }
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 50,
            gamma: 0.95,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::validation(format!("gamma {} is outside [0, 1)", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if let Optimizer::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) {
                return Err(Error::validation("adam parameters out of range"));
            }
        }
        Ok(())
    }
}

/// Dense layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let z: f64 = row.iter().zip(x).map(|(w, x)| w * x).sum();
            out.push(z + self.biases[o]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    layers: Vec<Layer>,
    seed: u64,
    steps: u64,
    adam: Option<AdamState>,
}

impl QNetwork {
    /// Standard 6-24-24-5 network with seeded initialization.
    pub fn new(seed: u64) -> Self {
        Self::with_layers(&DEFAULT_LAYERS, seed).expect("default layer sizes are valid")
    }

    /// Weights and biases drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn with_layers(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        net.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::validation(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            seed: 0,
            steps: 0,
            adam: None,
        })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].inputs];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of optimizer steps taken.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Replace one layer's parameters; `weights` is row-major `outputs x inputs`.
    pub fn set_layer(&mut self, index: usize, weights: &[f64], biases: &[f64]) -> Result<()> {
        let layer = self
            .layers
            .get_mut(index)
            .ok_or_else(|| Error::validation(format!("no layer {index}")))?;
        if weights.len() != layer.weights.len() || biases.len() != layer.biases.len() {
            return Err(Error::validation(format!("parameter shape mismatch for layer {index}")));
        }
        layer.weights.copy_from_slice(weights);
        layer.biases.copy_from_slice(biases);
        Ok(())
    }

    pub fn layer_weights(&self, index: usize) -> (&[f64], &[f64]) {
        let l = &self.layers[index];
        (&l.weights, &l.biases)
    }

    /// Copy parameters from a network with the same shape.
    pub fn copy_weights_from(&mut self, other: &QNetwork) {
        assert_eq!(self.layer_sizes(), other.layer_sizes());
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.weights.copy_from_slice(&src.weights);
            dst.biases.copy_from_slice(&src.biases);
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::validation(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input contains {v}")));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&a, &mut z);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut a, &mut z);
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(a)
    }

    /// Activations of every layer, input first, for backpropagation.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(acts.last().unwrap(), &mut z);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Accumulate into `grads` the gradient of a loss whose derivative with
    /// respect to the outputs is `d_out`. Parameters are laid out layer by
    /// layer, weights then biases.
    fn backprop(&self, acts: &[Vec<f64>], d_out: &[f64], grads: &mut [f64]) {
        let offsets = self.param_offsets();
        let mut delta = d_out.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[li];
            let (w_off, b_off) = (offsets[li], offsets[li] + layer.weights.len());
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grads[b_off + o] += d;
                let row = &mut grads[w_off + o * layer.inputs..w_off + (o + 1) * layer.inputs];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            // ReLU derivative, taken as 0 at exactly 0.
            for (p, a) in prev.iter_mut().zip(&acts[li]) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.weights.len() + l.biases.len();
        }
        offsets
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    /// One optimizer step on the mean squared error between the taken
    /// actions' Q-values and their targets. Returns the loss before the update.
    pub fn train_batch<S: AsRef<[f64]>>(
        &mut self,
        inputs: &[S],
        targets: &[f64],
        actions: &[usize],
        cfg: &TrainingConfig,
    ) -> Result<f64> {
        let n = inputs.len();
        if n == 0 || targets.len() != n || actions.len() != n {
            return Err(Error::validation(format!(
                "batch sizes disagree: {} inputs, {} targets, {} actions",
                n,
                targets.len(),
                actions.len()
            )));
        }
        if let Some(t) = targets.iter().find(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("training target {t}")));
        }
        let outputs = self.output_dim();
        let mut grads = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        let mut d_out = vec![0.0; outputs];
        for ((x, &y), &a) in inputs.iter().zip(targets).zip(actions) {
            let x = x.as_ref();
            self.check_input(x)?;
            if a >= outputs {
                return Err(Error::validation(format!("action index {a} out of range")));
            }
            let acts = self.forward_trace(x);
            let err = acts.last().unwrap()[a] - y;
            loss += err * err;
            d_out.iter_mut().for_each(|d| *d = 0.0);
            d_out[a] = 2.0 * err / n as f64;
            self.backprop(&acts, &d_out, &mut grads);
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss is {loss}")));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {i} is {} (loss {loss})",
                grads[i]
            )));
        }
        self.apply_gradients(&grads, cfg);
        self.steps += 1;
        Ok(loss)
    }

    fn apply_gradients(&mut self, grads: &[f64], cfg: &TrainingConfig) {
        let lr = cfg.learning_rate;
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in self.params_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, epsilon } => {
                let count = self.param_count();
                let mut st = self.adam.take().unwrap_or_else(|| AdamState {
                    m: vec![0.0; count],
                    v: vec![0.0; count],
                    t: 0,
                });
                st.t += 1;
                let c1 = 1.0 - beta1.powf(st.t as f64);
                let c2 = 1.0 - beta2.powf(st.t as f64);
                for (i, p) in self.params_mut().enumerate() {
                    let g = grads[i];
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                    *p -= lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + epsilon);
                }
                self.adam = Some(st);
            }
        }
    }

    /// Gradient of `0.5 * |Q(x)|^2` with respect to every parameter.
    pub fn output_norm_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let acts = self.forward_trace(x);
        let mut grads = vec![0.0; self.param_count()];
        self.backprop(&acts, acts.last().unwrap(), &mut grads);
        Ok(grads)
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let sizes = self.layer_sizes();
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(
            w,
            "layers {}",
            sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
        )?;
        writeln!(w, "seed {}", self.seed)?;
        writeln!(w, "steps {}", self.steps)?;
        for l in &self.layers {
            for o in 0..l.outputs {
                writeln!(w, "w {}", join_floats(&l.weights[o * l.inputs..(o + 1) * l.inputs]))?;
            }
            writeln!(w, "b {}", join_floats(&l.biases))?;
        }
        Ok(())
    }

    /// Read a checkpoint written by [`QNetwork::write_checkpoint`], consuming
    /// exactly its lines.
    pub fn read_checkpoint<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = CheckpointLines::new(r);
        let magic = lines.next_line()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("unknown network header `{magic}`")));
        }
        let sizes: Vec<usize> = lines.keyed("layers")?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad layer size `{s}`"))))
            .collect::<Result<_>>()?;
        let mut net = Self::zeros(&sizes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        net.seed = parse_value(&lines.keyed("seed")?)?;
        net.steps = parse_value(&lines.keyed("steps")?)?;
        for layer in &mut net.layers {
            for o in 0..layer.outputs {
                let row = parse_floats(&lines.keyed("w")?, layer.inputs)?;
                layer.weights[o * layer.inputs..(o + 1) * layer.inputs].copy_from_slice(&row);
            }
            layer.biases = parse_floats(&lines.keyed("b")?, layer.outputs)?;
        }
        Ok(net)
    }
}

fn join_floats(xs: &[f64]) -> String {
    let mut s = String::new();
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        // Shortest representation that round-trips exactly.
        write!(s, "{x:?}").unwrap();
    }
    s
}

fn parse_floats(line: &str, expected: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Checkpoint(format!("bad parameter `{s}`")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} values, found {}",
            vals.len()
        )));
    }
    Ok(vals)
}

pub(crate) fn parse_value<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad value `{s}`")))
}

/// Line reader for the checkpoint format, `key value...` per line.
pub(crate) struct CheckpointLines<'a, R> {
    reader: &'a mut R,
    line_no: usize,
}

impl<'a, R: BufRead> CheckpointLines<'a, R> {
    pub(crate) fn new(reader: &'a mut R) -> Self {
        Self { reader, line_no: 0 }
    }

    pub(crate) fn next_line(&mut self) -> Result<String> {
        let mut buf = String::new();
        let n = self
            .reader
            .read_line(&mut buf)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        self.line_no += 1;
        if n == 0 {
            return Err(Error::Checkpoint(format!("unexpected end of file at line {}", self.line_no)));
        }
        Ok(buf.trim_end().to_string())
    }

    pub(crate) fn keyed(&mut self, key: &str) -> Result<String> {
        let line = self.next_line()?;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest.to_string()),
            _ if line == key => Ok(String::new()),
            _ => Err(Error::Checkpoint(format!(
                "line {}: expected `{key}`, found `{line}`",
                self.line_no
            ))),
        }
    }
}

/// Largest relative difference between backpropagated gradients and central
/// finite differences of `0.5 * |Q(x)|^2`, over all parameters.
pub fn gradient_check(net: &QNetwork, input: &[f64], eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::validation(format!("eps {eps} must lie in (0, 1e-2]")));
    }
    let analytic = net.output_norm_gradient(input)?;
    let objective = |n: &QNetwork| -> Result<f64> {
        Ok(0.5 * n.forward(input)?.iter().map(|q| q * q).sum::<f64>())
    };
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let original = *probe.params_mut().nth(i).unwrap();
        *probe.params_mut().nth(i).unwrap() = original + eps;
        let plus = objective(&probe)?;
        *probe.params_mut().nth(i).unwrap() = original - eps;
        let minus = objective(&probe)?;
        *probe.params_mut().nth(i).unwrap() = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let scale = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((a - numeric).abs() / scale);
    }
    Ok(worst)
}

// Below this magnitude differences are compared absolutely, so gradients that
// are zero up to rounding do not produce spurious relative errors.
const GRAD_CHECK_FLOOR: f64 = 1e-4;
