mod common;

use ephemeral_alloc::baselines::{
    allocatable_units_fixed, allocatable_units_scavenger, run_baseline_episode, scavenger_margin,
    MarginPolicy,
};
use ephemeral_alloc::economics::{CostModel, PenaltySchedule};
use ephemeral_alloc::env::EnvConfig;
use proptest::prelude::*;

use common::window_strategy;

fn history() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0f64..0.5, 0.0f64..0.5), 2..100)
}

proptest! {
    #[test]
    fn fixed_is_non_increasing_in_the_margin(cap in 0u32..10_000, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let at = |f| allocatable_units_fixed(cap, &MarginPolicy { fixed_fraction: f, ..MarginPolicy::fixed() });
        prop_assert!(at(hi) <= at(lo));
        prop_assert!(at(lo) <= cap);
    }

    #[test]
    fn scavenger_margin_ignores_translation(h in history(), shift in 0.0f64..0.5) {
        let p = MarginPolicy::scavenger();
        let moved: Vec<(f64, f64)> = h.iter().map(|&(c, m)| (c + shift, m + shift)).collect();
        let a = scavenger_margin(&h, &p).unwrap();
        let b = scavenger_margin(&moved, &p).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn scavenger_matches_sample_deviation(h in history(), k in 0.0f64..5.0, free in 0u32..500) {
        let p = MarginPolicy { scavenger_k: k, ..MarginPolicy::scavenger() };
        let n = h.len() as f64;
        let sd = |xs: Vec<f64>| {
            let mean = xs.iter().sum::<f64>() / n;
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        let sigma = sd(h.iter().map(|p| p.0).collect()).max(sd(h.iter().map(|p| p.1).collect()));
        let margin = (k * sigma).clamp(0.0, 1.0);
        prop_assert!((scavenger_margin(&h, &p).unwrap() - margin).abs() <= 1e-12);
        let units = allocatable_units_scavenger(&h, free, &p).unwrap();
        let want = (f64::from(free) * (1.0 - margin)).floor() as u32;
        prop_assert!(units == want || units == want + 1, "{units} vs {want}");
    }

    #[test]
    fn baselines_never_touch_the_stable_pool(
        w in window_strategy(1..=40),
        h in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..30),
        fixed in any::<bool>(),
    ) {
        let policy = if fixed { MarginPolicy::fixed() } else { MarginPolicy::scavenger() };
        let run = || run_baseline_episode(
            &policy, &w, &CostModel::default(), &EnvConfig::default(),
            &PenaltySchedule::default(), &h, Some(0.5), 0,
        ).unwrap();
        let (r, env) = run();
        prop_assert_eq!(r.ledger.stable_unit_hours, 0.0);
        prop_assert_eq!(r.stable_pct, 0.0);
        prop_assert!(env.log().iter().all(|s| s.alloc_s == 0));
        let (again, env2) = run();
        prop_assert_eq!(r, again);
        prop_assert_eq!(env.log(), env2.log());
    }
}

#[test]
fn worked_margins() {
    assert_eq!(allocatable_units_fixed(100, &MarginPolicy::fixed()), 95);
    let alt: Vec<(f64, f64)> = (0..100).map(|i| if i % 2 == 0 { (0.4, 0.4) } else { (0.6, 0.6) }).collect();
    assert_eq!(allocatable_units_scavenger(&alt, 100, &MarginPolicy::scavenger()).unwrap(), 89);
    let flat = vec![(0.3, 0.2); 10];
    assert_eq!(allocatable_units_scavenger(&flat, 100, &MarginPolicy::scavenger()).unwrap(), 100);
}

#[test]
fn invalid_policies_are_rejected() {
    assert!(MarginPolicy { fixed_fraction: 1.5, ..MarginPolicy::fixed() }.validate().is_err());
    assert!(MarginPolicy { scavenger_k: -1.0, ..MarginPolicy::scavenger() }.validate().is_err());
    assert!(MarginPolicy { history_window: 1, ..MarginPolicy::scavenger() }.validate().is_err());
}
