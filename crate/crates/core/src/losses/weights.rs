use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mixing weights of the composite objective. The signal term gets `1 − β − λ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(beta: f64, lambda: f64) -> Result<Self> {
        let w = Self { beta, lambda };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| (0.0..=1.0).contains(&x);
        if !ok(self.beta) || !ok(self.lambda) || self.beta + self.lambda > 1.0 {
            return Err(Error::Config(format!(
                "loss weights beta={} lambda={} must lie in [0, 1] with beta + lambda <= 1",
                self.beta, self.lambda
            )));
        }
        Ok(())
    }

    pub fn sisdr_weight(&self) -> f64 {
        1.0 - self.beta - self.lambda
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClsSchedule {
    pub omega_start: f64,
    pub omega_end: f64,
    pub total_steps: u64,
    pub enabled: bool,
}

impl ClsSchedule {
    pub fn new(total_steps: u64, enabled: bool) -> Result<Self> {
        let s = Self {
            omega_start: 1.0,
            omega_end: 0.8,
            total_steps,
            enabled,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (-1.0..=1.0).contains(&x);
        if !unit(self.omega_start) || !unit(self.omega_end) || self.omega_start < self.omega_end {
            return Err(Error::Config("omega must decrease within [-1, 1]".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config(
                "the omega schedule needs at least one step".into(),
            ));
        }
        Ok(())
    }
}

/// SECS threshold at global optimiser step `step`, linear in the step.
pub fn omega_at(step: u64, sched: &ClsSchedule) -> Result<f64> {
    if step > sched.total_steps {
        return Err(Error::Invalid(format!(
            "step {step} is past the schedule end {}",
            sched.total_steps
        )));
    }
    let t = step as f64 / sched.total_steps as f64;
    Ok(sched.omega_start * (1.0 - t) + sched.omega_end * t)
}

/// `x` while the detached similarity is at most `omega`, else exactly zero.
pub fn cls_gate(x: f64, secs_value: f64, omega: f64) -> f64 {
    if secs_value <= omega {
        x
    } else {
        0.0
    }
}

/// Component values and the weighted total of one sample's objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sisdr: f64,
    pub l_ce: f64,
    /// Consistency term before gating (0 when no consistency loss is used).
    pub l_consistency: f64,
    /// Detached enrollment/estimate similarity, when it was computed.
    pub secs: Option<f64>,
    pub omega: f64,
    pub gate_open: bool,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBreakdown {
    /// The total implied by the components, weights and gate.
    pub fn recomputed_total(&self) -> f64 {
        total_of(
            self.l_sisdr,
            self.l_ce,
            self.l_consistency,
            &self.weights,
            self.gate_open,
        )
    }

    /// Consistency contribution as it entered the total.
    pub fn gated_consistency(&self) -> f64 {
        if self.gate_open {
            self.l_consistency
        } else {
            0.0
        }
    }
}

/// Same association order as the tape builder, so values agree bit for bit.
fn total_of(l_sisdr: f64, l_ce: f64, l_c: f64, w: &LossWeights, gate_open: bool) -> f64 {
    let mut total = w.sisdr_weight() * l_sisdr;
    if w.beta > 0.0 {
        total += w.beta * l_ce;
    }
    if w.lambda > 0.0 && gate_open {
        total += w.lambda * l_c;
    }
    total
}

pub fn combined_loss(l_sisdr: f64, l_ce: f64, l_c: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_sisdr,
        l_ce,
        l_consistency: l_c,
        secs: None,
        omega: 1.0,
        gate_open: true,
        weights: *w,
        total: total_of(l_sisdr, l_ce, l_c, w, true),
    }
}

/// Composite objective with the consistency term suppressed once the
/// detached similarity exceeds the scheduled threshold.
pub fn cls_combined_loss(
    l_sisdr: f64,
    l_ce: f64,
    l_c: f64,
    secs_value: f64,
    w: &LossWeights,
    sched: &ClsSchedule,
    step: u64,
) -> Result<LossBreakdown> {
    if !(-1.0..=1.0).contains(&secs_value) {
        return Err(Error::Invalid(format!("SECS {secs_value} outside [-1, 1]")));
    }
    let omega = omega_at(step, sched)?;
    let gate_open = !sched.enabled || secs_value <= omega;
    Ok(LossBreakdown {
        l_sisdr,
        l_ce,
        l_consistency: l_c,
        secs: Some(secs_value),
        omega,
        gate_open,
        weights: *w,
        total: total_of(l_sisdr, l_ce, l_c, w, gate_open),
    })
}
