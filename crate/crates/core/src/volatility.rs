//! Volatility estimation: the fraction of steps in a window where the
//! forecast underestimated actual utilization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traces::{TraceSample, TraceWindow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolatilityEstimate {
    pub p_hat: f64,
    pub window_len: usize,
    pub underestimation_count: usize,
}

/// 1 if either CPU or memory was underestimated at this step. An exact
/// prediction is not an underestimate.
pub fn indicator_z(sample: &TraceSample) -> u8 {
    u8::from(sample.cpu_pred < sample.cpu_used || sample.mem_pred < sample.mem_used)
}

pub fn estimate_volatility(window: &TraceWindow) -> Result<VolatilityEstimate> {
    estimate_from_samples(window.samples())
}

pub fn estimate_from_samples(samples: &[TraceSample]) -> Result<VolatilityEstimate> {
    if samples.is_empty() {
        return Err(Error::Empty("cannot estimate volatility of an empty window"));
    }
    let count = samples.iter().map(|s| usize::from(indicator_z(s))).sum();
    Ok(VolatilityEstimate {
        p_hat: count as f64 / samples.len() as f64,
        window_len: samples.len(),
        underestimation_count: count,
    })
}

/// Pool-level estimate from per-host windows, weighted by host CPU cores.
pub fn pool_volatility(windows: &[TraceWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Empty("no host windows to aggregate"));
    }
    let mut weighted = 0.0;
    let mut total = 0.0;
    for w in windows {
        let cores = f64::from(w.host.cpu_cores);
        weighted += cores * estimate_volatility(w)?.p_hat;
        total += cores;
    }
    Ok(weighted / total)
}
