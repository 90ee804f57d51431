//! Host utilization traces: the CSV format, a seeded synthetic generator and
//! the plug-in forecaster that produces next-window predictions.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 24 hours at a 3-minute sampling period.
pub const DEFAULT_WINDOW_LEN: usize = 480;

/// Exact header of the trace CSV format.
pub const CSV_HEADER: [&str; 5] = ["t", "cpu_used", "mem_used", "cpu_pred", "mem_pred"];

/// One sampling step of a host: measured and predicted utilization, as
/// fractions of host capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: usize,
    pub cpu_used: f64,
    pub mem_used: f64,
    pub cpu_pred: f64,
    pub mem_pred: f64,
}

impl TraceSample {
    pub fn new(t: usize, cpu_used: f64, mem_used: f64, cpu_pred: f64, mem_pred: f64) -> Self {
        Self {
            t,
            cpu_used,
            mem_used,
            cpu_pred,
            mem_pred,
        }
    }

    /// Prediction error `pred - used` for CPU and memory.
    pub fn errors(&self) -> (f64, f64) {
        (self.cpu_pred - self.cpu_used, self.mem_pred - self.mem_used)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("cpu_used", self.cpu_used),
            ("mem_used", self.mem_used),
            ("cpu_pred", self.cpu_pred),
            ("mem_pred", self.mem_pred),
        ];
        for (name, v) in fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "step {}: {name}={v} is outside [0, 1]",
                    self.t
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostSpec {
    pub cpu_cores: u32,
    pub mem_gb: u32,
}

impl HostSpec {
    pub fn new(cpu_cores: u32, mem_gb: u32) -> Result<Self> {
        let host = Self { cpu_cores, mem_gb };
        host.validate()?;
        Ok(host)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cpu_cores == 0 || self.mem_gb == 0 {
            return Err(Error::validation(format!(
                "host capacity must be positive, got {} cores / {} GB",
                self.cpu_cores, self.mem_gb
            )));
        }
        Ok(())
    }
}

impl Default for HostSpec {
    fn default() -> Self {
        Self {
            cpu_cores: 256,
            mem_gb: 2048,
        }
    }
}

/// One day (by default) of samples for a single host. Step indices inside a
/// window always run `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceWindow {
    pub host: HostSpec,
    samples: Vec<TraceSample>,
}

impl TraceWindow {
    pub fn new(host: HostSpec, samples: Vec<TraceSample>) -> Result<Self> {
        host.validate()?;
        if samples.is_empty() {
            return Err(Error::Empty("trace window has no samples"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.t != i {
                return Err(Error::validation(format!(
                    "window step indices must be consecutive from 0, found t={} at position {i}",
                    s.t
                )));
            }
            s.validate()?;
        }
        Ok(Self { host, samples })
    }

    pub fn samples(&self) -> &[TraceSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, t: usize) -> &TraceSample {
        &self.samples[t]
    }

    /// Copy of this window whose predictions are replaced by `preds`.
    pub fn with_predictions(&self, preds: &[(f64, f64)]) -> Result<Self> {
        if preds.len() != self.samples.len() {
            return Err(Error::validation(format!(
                "prediction length {} does not match window length {}",
                preds.len(),
                self.samples.len()
            )));
        }
        let samples = self
            .samples
            .iter()
            .zip(preds)
            .map(|(s, &(c, m))| TraceSample {
                cpu_pred: c,
                mem_pred: m,
                ..*s
            })
            .collect();
        TraceWindow::new(self.host, samples)
    }
}

/// Load a trace CSV and cut it into consecutive windows of `window_len`
/// steps. A trailing partial window is dropped.
pub fn load_traces(
    path: impl AsRef<Path>,
    host: HostSpec,
    window_len: usize,
) -> Result<Vec<TraceWindow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_traces(BufReader::new(file), host, window_len)
}

pub fn read_traces<R: Read>(
    reader: R,
    host: HostSpec,
    window_len: usize,
) -> Result<Vec<TraceWindow>> {
    host.validate()?;
    if window_len == 0 {
        return Err(Error::validation("window length must be positive"));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header `{}`, found `{}`",
                CSV_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut rows = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(rows.len() + 2, |p| p.line() as usize);
        let sample = parse_row(&record, line)?;
        if sample.t != rows.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected t={}, found t={}", rows.len(), sample.t),
            });
        }
        sample
            .validate()
            .map_err(|e| Error::validation(format!("line {line}: {e}")))?;
        rows.push(sample);
    }

    rows.chunks_exact(window_len)
        .map(|chunk| {
            let samples = chunk
                .iter()
                .enumerate()
                .map(|(i, s)| TraceSample { t: i, ..*s })
                .collect();
            TraceWindow::new(host, samples)
        })
        .collect()
}

fn parse_row(record: &csv::StringRecord, line: usize) -> Result<TraceSample> {
    if record.len() != CSV_HEADER.len() {
        return Err(Error::Parse {
            line,
            message: format!("expected {} fields, found {}", CSV_HEADER.len(), record.len()),
        });
    }
    let t = record[0].parse::<usize>().map_err(|e| Error::Parse {
        line,
        message: format!("t `{}`: {e}", &record[0]),
    })?;
    let mut vals = [0.0f64; 4];
    for (i, v) in vals.iter_mut().enumerate() {
        let raw = &record[i + 1];
        *v = raw.parse::<f64>().map_err(|e| Error::Parse {
            line,
            message: format!("{} `{raw}`: {e}", CSV_HEADER[i + 1]),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("{} is not finite", CSV_HEADER[i + 1]),
            });
        }
    }
    Ok(TraceSample::new(t, vals[0], vals[1], vals[2], vals[3]))
}

/// Write windows back-to-back as one CSV; `t` runs continuously across windows.
pub fn write_traces(path: impl AsRef<Path>, windows: &[TraceWindow]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_traces_to(&mut w, windows).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_traces_to<W: Write>(w: &mut W, windows: &[TraceWindow]) -> std::io::Result<()> {
    writeln!(w, "{}", CSV_HEADER.join(","))?;
    let mut t = 0usize;
    for window in windows {
        for s in window.samples() {
            // `{}` on f64 prints the shortest representation that parses back exactly.
            writeln!(
                w,
                "{t},{},{},{},{}",
                s.cpu_used, s.mem_used, s.cpu_pred, s.mem_pred
            )?;
            t += 1;
        }
    }
    Ok(())
}

/// Parameters of the synthetic trace generator.
///
/// Predicted utilization follows a daily cosine around the base load plus
/// Gaussian noise. With probability `p_true` a step is an underestimate: the
/// actual utilization is the prediction plus a shock that eats a fraction in
/// `[shock_min, shock_max]` of the predicted free capacity (on both metrics).
/// Otherwise the actual utilization sits at or below the prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorProfile {
    pub host: HostSpec,
    pub cpu_base: f64,
    pub mem_base: f64,
    pub diurnal_amplitude: f64,
    pub noise_scale: f64,
    pub shock_min: f64,
    pub shock_max: f64,
    /// Scale of the half-normal gap between prediction and actual on
    /// steps that are not underestimated.
    pub overestimate_scale: f64,
    pub p_true: f64,
    pub steps_per_day: usize,
}

impl Default for GeneratorProfile {
    fn default() -> Self {
        Self {
            host: HostSpec::default(),
            cpu_base: 0.25,
            mem_base: 0.30,
            diurnal_amplitude: 0.03,
            noise_scale: 0.005,
            shock_min: 0.06,
            shock_max: 0.07,
            overestimate_scale: 0.01,
            p_true: 0.5,
            steps_per_day: DEFAULT_WINDOW_LEN,
        }
    }
}

impl GeneratorProfile {
    pub fn validate(&self) -> Result<()> {
        self.host.validate()?;
        if !(0.0..=1.0).contains(&self.p_true) {
            return Err(Error::validation(format!(
                "p_true={} is outside [0, 1]",
                self.p_true
            )));
        }
        for (name, v) in [("cpu_base", self.cpu_base), ("mem_base", self.mem_base)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name}={v} is outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("diurnal_amplitude", self.diurnal_amplitude),
            ("noise_scale", self.noise_scale),
            ("overestimate_scale", self.overestimate_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name}={v} must be >= 0")));
            }
        }
        if !(self.shock_min > 0.0 && self.shock_min <= self.shock_max && self.shock_max < 1.0) {
            return Err(Error::validation(format!(
                "shock range [{}, {}] must satisfy 0 < min <= max < 1",
                self.shock_min, self.shock_max
            )));
        }
        if self.steps_per_day == 0 {
            return Err(Error::validation("steps_per_day must be positive"));
        }
        Ok(())
    }
}

// Predictions are kept strictly below 1 so a positive shock is always representable.
const MAX_PRED: f64 = 0.99;

/// Generate `days` windows of synthetic traces. Output depends only on
/// `seed` and `profile`.
pub fn generate_synthetic(
    seed: u64,
    days: usize,
    profile: &GeneratorProfile,
) -> Result<Vec<TraceWindow>> {
    profile.validate()?;
    if days == 0 {
        return Err(Error::validation("days must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, profile.noise_scale)
        .map_err(|e| Error::validation(format!("noise_scale: {e}")))?;
    let over = Normal::new(0.0, profile.overestimate_scale)
        .map_err(|e| Error::validation(format!("overestimate_scale: {e}")))?;
    let n = profile.steps_per_day;

    let mut windows = Vec::with_capacity(days);
    for _ in 0..days {
        let mut samples = Vec::with_capacity(n);
        for t in 0..n {
            let phase = 2.0 * PI * t as f64 / n as f64;
            let swing = -profile.diurnal_amplitude * phase.cos();
            let cpu_pred =
                (profile.cpu_base + swing + noise.sample(&mut rng)).clamp(0.0, MAX_PRED);
            let mem_pred =
                (profile.mem_base + swing + noise.sample(&mut rng)).clamp(0.0, MAX_PRED);
            // gen::<f64>() is in [0, 1), so p_true = 0 and 1 are exact.
            let underestimated = rng.gen::<f64>() < profile.p_true;
            let (cpu_used, mem_used) = if underestimated {
                let uc = rng.gen_range(profile.shock_min..=profile.shock_max);
                let um = rng.gen_range(profile.shock_min..=profile.shock_max);
                (
                    cpu_pred + uc * (1.0 - cpu_pred),
                    mem_pred + um * (1.0 - mem_pred),
                )
            } else {
                let dc: f64 = over.sample(&mut rng);
                let dm: f64 = over.sample(&mut rng);
                (
                    (cpu_pred - dc.abs()).max(0.0),
                    (mem_pred - dm.abs()).max(0.0),
                )
            };
            samples.push(TraceSample::new(
                t,
                cpu_used.min(1.0),
                mem_used.min(1.0),
                cpu_pred,
                mem_pred,
            ));
        }
        windows.push(TraceWindow::new(profile.host, samples)?);
    }
    Ok(windows)
}

/// How next-window predictions are produced from history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Forecaster {
    /// Use the predictions recorded in the trace as-is.
    #[default]
    Recorded,
    /// Step `t` of the next window repeats step `t` of the latest window.
    SeasonalNaive,
    /// Step-wise mean over the last `windows` windows.
    SeasonalMean { windows: usize },
}

/// Predict `(cpu, mem)` for every step of the window following `history`.
/// `Recorded` has nothing to derive from history and falls back to seasonal-naive.
pub fn forecast_next_window(
    history: &[TraceWindow],
    forecaster: Forecaster,
) -> Result<Vec<(f64, f64)>> {
    let last = history
        .last()
        .ok_or(Error::Empty("forecast history is empty"))?;
    let depth = match forecaster {
        Forecaster::Recorded | Forecaster::SeasonalNaive => 1,
        Forecaster::SeasonalMean { windows } => windows.max(1).min(history.len()),
    };
    let recent = &history[history.len() - depth..];
    let len = last.len();
    Ok((0..len)
        .map(|t| {
            let (mut c, mut m, mut k) = (0.0, 0.0, 0.0);
            for w in recent.iter().filter(|w| w.len() == len) {
                let s = w.sample(t);
                c += s.cpu_used;
                m += s.mem_used;
                k += 1.0;
            }
            (c / k, m / k)
        })
        .collect())
}

/// Replace each window's predictions with the forecaster's output given all
/// earlier windows. The first window has no history and keeps its recorded
/// predictions.
pub fn apply_forecaster(windows: &[TraceWindow], forecaster: Forecaster) -> Result<Vec<TraceWindow>> {
    if forecaster == Forecaster::Recorded {
        return Ok(windows.to_vec());
    }
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if i == 0 {
                Ok(w.clone())
            } else {
                w.with_predictions(&forecast_next_window(&windows[..i], forecaster)?)
            }
        })
        .collect()
}
