//! Prices, the per-step reward and daily profit with tiered SLA discounts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hourly unit prices. `cpv` is the penalty per missing unit and only shapes
/// the learning reward; reported profit uses the penalty schedule instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub cpe: f64,
    pub cps: f64,
    pub cpv: f64,
    pub step_minutes: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            cpe: 0.0317,
            cps: 0.0928,
            cpv: 2.0 * 0.0928,
            step_minutes: 3.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cpe", self.cpe), ("cps", self.cps), ("cpv", self.cpv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name}={v} must be a non-negative price")));
            }
        }
        if self.cpe >= self.cps {
            return Err(Error::validation(format!(
                "cpe {} must be below cps {}",
                self.cpe, self.cps
            )));
        }
        if !(self.step_minutes > 0.0 && self.step_minutes.is_finite()) {
            return Err(Error::validation("step_minutes must be positive"));
        }
        Ok(())
    }

    pub fn step_hours(&self) -> f64 {
        self.step_minutes / 60.0
    }
}

/// Reward of one step: ephemeral revenue minus stable cost minus the
/// violation penalty, prices prorated to the step length.
pub fn step_reward(alloc_e: u32, alloc_s: u32, rem: u32, model: &CostModel) -> f64 {
    (f64::from(alloc_e) * model.cpe - f64::from(alloc_s) * model.cps - f64::from(rem) * model.cpv)
        * model.step_hours()
}

/// Discount applied when daily violation time lies in `(lower, upper]`.
/// `upper = None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyTier {
    pub lower: f64,
    pub upper: Option<f64>,
    pub discount: f64,
}

impl PenaltyTier {
    pub fn contains(&self, minutes: f64) -> bool {
        minutes > self.lower && self.upper.map_or(true, |u| minutes <= u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySchedule {
    pub tiers: Vec<PenaltyTier>,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        let tier = |lower, upper, discount| PenaltyTier {
            lower,
            upper,
            discount,
        };
        Self {
            tiers: vec![
                tier(15.0, Some(120.0), 0.10),
                tier(120.0, Some(720.0), 0.15),
                tier(720.0, None, 0.30),
            ],
        }
    }
}

impl PenaltySchedule {
    pub fn new(tiers: Vec<PenaltyTier>) -> Result<Self> {
        let schedule = Self { tiers };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<&PenaltyTier> = None;
        for (i, tier) in self.tiers.iter().enumerate() {
            if !(0.0..=1.0).contains(&tier.discount) {
                return Err(Error::validation(format!(
                    "tier {i}: discount {} is outside [0, 1]",
                    tier.discount
                )));
            }
            if !(tier.lower >= 0.0) || tier.upper.is_some_and(|u| !(u > tier.lower)) {
                return Err(Error::validation(format!("tier {i}: empty or negative range")));
            }
            if let Some(p) = prev {
                match p.upper {
                    Some(u) if tier.lower >= u => {}
                    _ => {
                        return Err(Error::validation(format!(
                            "tier {i} overlaps the previous tier"
                        )))
                    }
                }
                if tier.discount < p.discount {
                    return Err(Error::validation(format!(
                        "tier {i}: discounts must be non-decreasing"
                    )));
                }
            }
            prev = Some(tier);
        }
        Ok(())
    }
}

pub fn discount(violation_minutes: f64, schedule: &PenaltySchedule) -> f64 {
    schedule
        .tiers
        .iter()
        .find(|t| t.contains(violation_minutes))
        .map_or(0.0, |t| t.discount)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DailyLedger {
    pub ephemeral_unit_hours: f64,
    pub stable_unit_hours: f64,
    pub violation_minutes: f64,
}

impl DailyLedger {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !(ok(self.ephemeral_unit_hours) && ok(self.stable_unit_hours) && ok(self.violation_minutes))
        {
            return Err(Error::validation(format!("ledger has negative entries: {self:?}")));
        }
        if self.violation_minutes > 1440.0 {
            return Err(Error::validation(format!(
                "{} violation minutes exceed one day",
                self.violation_minutes
            )));
        }
        Ok(())
    }
}

/// Ephemeral revenue, less stable cost, less the SLA discount on revenue.
pub fn daily_profit(ledger: &DailyLedger, model: &CostModel, schedule: &PenaltySchedule) -> f64 {
    let gross = ledger.ephemeral_unit_hours * model.cpe;
    let sla_cost = gross * discount(ledger.violation_minutes, schedule);
    gross - ledger.stable_unit_hours * model.cps - sla_cost
}
