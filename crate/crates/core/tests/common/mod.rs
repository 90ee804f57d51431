#![allow(dead_code)]

use ephemeral_alloc::traces::{HostSpec, TraceSample, TraceWindow};
use proptest::prelude::*;

pub fn sample_strategy() -> impl Strategy<Value = (f64, f64, f64, f64)> {
    (0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0)
}

/// Random window of `len` steps on a small host, so unit counts stay low.
pub fn window_strategy(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = TraceWindow> {
    (1u32..=8, prop::collection::vec(sample_strategy(), len)).prop_map(|(scale, rows)| {
        let host = HostSpec::new(2 * scale, 8 * scale).unwrap();
        let samples = rows
            .into_iter()
            .enumerate()
            .map(|(t, (a, b, c, d))| TraceSample::new(t, a, b, c, d))
            .collect();
        TraceWindow::new(host, samples).unwrap()
    })
}

pub fn window_from(host: HostSpec, rows: &[(f64, f64, f64, f64)]) -> TraceWindow {
    let samples = rows
        .iter()
        .enumerate()
        .map(|(t, &(a, b, c, d))| TraceSample::new(t, a, b, c, d))
        .collect();
    TraceWindow::new(host, samples).unwrap()
}

/// Eq.-level arithmetic written out independently of the library.
pub fn oracle_step_reward(e: u32, s: u32, rem: u32, cpe: f64, cps: f64, cpv: f64, minutes: f64) -> f64 {
    (e as f64 * cpe - s as f64 * cps - rem as f64 * cpv) * (minutes / 60.0)
}

pub fn oracle_discount(minutes: f64) -> f64 {
    if minutes > 720.0 {
        0.30
    } else if minutes > 120.0 {
        0.15
    } else if minutes > 15.0 {
        0.10
    } else {
        0.0
    }
}

pub fn oracle_profit(e_hours: f64, s_hours: f64, minutes: f64, cpe: f64, cps: f64) -> f64 {
    let gross = e_hours * cpe;
    gross - s_hours * cps - gross * oracle_discount(minutes)
}

/// Central finite differences of `0.5 * |Q(x)|^2`, perturbing parameters in
/// the order the network reports gradients: per layer, weights then biases.
pub fn finite_difference_gradient(
    net: &ephemeral_alloc::qnet::QNetwork,
    x: &[f64],
    eps: f64,
) -> Vec<f64> {
    let objective = |n: &ephemeral_alloc::qnet::QNetwork| -> f64 {
        0.5 * n.forward(x).unwrap().iter().map(|q| q * q).sum::<f64>()
    };
    let mut grads = Vec::new();
    let layers = net.layer_sizes().len() - 1;
    for li in 0..layers {
        let (w, b) = net.layer_weights(li);
        let (w, b) = (w.to_vec(), b.to_vec());
        for k in 0..w.len() + b.len() {
            let mut probe = net.clone();
            let mut eval = |delta: f64| {
                let (mut w2, mut b2) = (w.clone(), b.clone());
                if k < w.len() {
                    w2[k] += delta;
                } else {
                    b2[k - w.len()] += delta;
                }
                probe.set_layer(li, &w2, &b2).unwrap();
                objective(&probe)
            };
            grads.push((eval(eps) - eval(-eps)) / (2.0 * eps));
        }
    }
    grads
}

/// Plain forward pass: ReLU on hidden layers, identity on the output.
pub fn naive_forward(net: &ephemeral_alloc::qnet::QNetwork, x: &[f64]) -> Vec<f64> {
    let sizes = net.layer_sizes();
    let mut a = x.to_vec();
    for li in 0..sizes.len() - 1 {
        let (w, b) = net.layer_weights(li);
        let (n_in, n_out) = (sizes[li], sizes[li + 1]);
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            let mut acc = b[o];
            for i in 0..n_in {
                acc += w[o * n_in + i] * a[i];
            }
            z[o] = if li + 2 < sizes.len() { acc.max(0.0) } else { acc };
        }
        a = z;
    }
    a
}

pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Distance of the closest hidden pre-activation from the ReLU kink.
pub fn kink_distance(net: &ephemeral_alloc::qnet::QNetwork, x: &[f64]) -> f64 {
    let sizes = net.layer_sizes();
    let mut a = x.to_vec();
    let mut closest = f64::INFINITY;
    for li in 0..sizes.len() - 2 {
        let (w, b) = net.layer_weights(li);
        let (n_in, n_out) = (sizes[li], sizes[li + 1]);
        let z: Vec<f64> = (0..n_out)
            .map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * a[i]).sum::<f64>())
            .collect();
        closest = z.iter().fold(closest, |m, v| m.min(v.abs()));
        a = z.into_iter().map(|v| v.max(0.0)).collect();
    }
    closest
}
