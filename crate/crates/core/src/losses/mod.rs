//! Signal and speaker-consistency objectives.
//!
//! Every loss exists twice: as a plain function on values and as a builder
//! that records it on a [`Tape`]. The tape versions are what training
//! differentiates; the plain versions are the reference they are tested
//! against.

mod bank;
mod weights;

use std::f64::consts::LN_10;

use crate::diffgraph::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{UnitEmbedding, UnitVar};

pub use bank::{build_centroid_bank, CentroidBank, BANK_VERSION};
pub use weights::{
    cls_combined_loss, cls_gate, combined_loss, omega_at, ClsSchedule, LossBreakdown, LossWeights,
};

pub const SI_SDR_EPS: f64 = 1e-12;
pub const SI_SDR_CLAMP_DB: f64 = 60.0;

/// SI-SDR in dB without the reporting clamp.
pub fn si_sdr_unclamped(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Invalid(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if !(ref_energy > 0.0) {
        return Err(Error::Invalid("reference has zero energy".into()));
    }
    let alpha = est.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / ref_energy;
    let target: f64 = reference.iter().map(|r| (alpha * r).powi(2)).sum();
    let noise: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, r)| (alpha * r - e).powi(2))
        .sum();
    Ok(10.0 * (target / (noise + SI_SDR_EPS)).log10())
}

/// SI-SDR in dB, clamped to ±60 dB for reporting.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(si_sdr_unclamped(est, reference)?.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}

/// Negative SI-SDR of the `1 × L` node `est` against constant `reference`.
pub fn si_sdr_loss_on_tape(tape: &mut Tape, est: Var, reference: &[f64]) -> Result<Var> {
    let shape = tape.value(est).shape().to_vec();
    if shape != [1, reference.len()] {
        return Err(Error::Invalid(format!(
            "estimate shape {shape:?} does not match a reference of {} samples",
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if !(ref_energy > 0.0) {
        return Err(Error::Invalid("reference has zero energy".into()));
    }
    let r = tape.constant(Tensor::row_from(reference));
    let inner = tape.dot(est, r)?;
    let alpha = tape.scale(inner, 1.0 / ref_energy)?;
    let proj = tape.mul(alpha, r)?;
    let p2 = tape.square(proj)?;
    let target = tape.sum_all(p2)?;
    let resid = tape.sub(proj, est)?;
    let r2 = tape.square(resid)?;
    let noise = tape.sum_all(r2)?;
    let noise = tape.add_scalar(noise, SI_SDR_EPS)?;
    let lt = tape.log(target)?;
    let ln = tape.log(noise)?;
    let ratio = tape.sub(lt, ln)?;
    Ok(tape.scale(ratio, -10.0 / LN_10)?)
}

/// Value of [`si_sdr_loss_on_tape`].
pub fn si_sdr_loss(est: &[f64], reference: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::row_from(est));
    let l = si_sdr_loss_on_tape(&mut tape, e, reference)?;
    Ok(tape.scalar(l)?)
}

/// Cosine of two unit embeddings, in [-1, 1].
pub fn secs(e_r: &UnitEmbedding, e_s_hat: &UnitEmbedding) -> Result<f64> {
    if e_r.data().len() != e_s_hat.data().len() {
        return Err(Error::Invalid("embedding dimensions differ".into()));
    }
    Ok(e_r.dot(e_s_hat).clamp(-1.0, 1.0))
}

pub fn sc_loss(e_r: &UnitEmbedding, e_s_hat: &UnitEmbedding) -> Result<f64> {
    Ok(1.0 - secs(e_r, e_s_hat)?)
}

pub fn secs_on_tape(tape: &mut Tape, e_r: UnitVar, e_s_hat: UnitVar) -> Result<Var> {
    Ok(tape.dot(e_r.0, e_s_hat.0)?)
}

pub fn sc_loss_on_tape(tape: &mut Tape, e_r: UnitVar, e_s_hat: UnitVar) -> Result<Var> {
    let s = secs_on_tape(tape, e_r, e_s_hat)?;
    let neg = tape.scale(s, -1.0)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}

/// Softmax cross-entropy over cosines to every centroid, targeting `target`.
/// Centroids enter as constants.
pub fn c_sc_loss_on_tape(
    tape: &mut Tape,
    e_s_hat: UnitVar,
    bank: &CentroidBank,
    target: u32,
) -> Result<Var> {
    let idx = bank
        .index_of(target)
        .ok_or_else(|| Error::Invalid(format!("speaker {target} is not in the centroid bank")))?;
    let dirs = tape.constant(bank.directions().clone());
    let cos = tape.matmul(e_s_hat.0, dirs)?;
    let lp = tape.log_softmax(cos)?;
    let picked = tape.slice(lp, 1, idx, idx + 1)?;
    Ok(tape.scale(picked, -1.0)?)
}

pub fn c_sc_loss(e_s_hat: &UnitEmbedding, bank: &CentroidBank, target: u32) -> Result<f64> {
    let mut tape = Tape::new();
    let e = tape.constant(e_s_hat.tensor().clone());
    let l = c_sc_loss_on_tape(&mut tape, UnitVar(e), bank, target)?;
    Ok(tape.scalar(l)?)
}

/// Negative log-probability of class `target` under `softmax(logits)`.
pub fn ce_loss_on_tape(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    let n = *tape.value(logits).shape().last().unwrap_or(&0);
    if target >= n {
        return Err(Error::Invalid(format!(
            "class {target} out of range for {n} logits"
        )));
    }
    let lp = tape.log_softmax(logits)?;
    let picked = tape.slice(lp, 1, target, target + 1)?;
    Ok(tape.scale(picked, -1.0)?)
}

pub fn ce_loss(logits: &[f64], target: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::row_from(logits));
    let l = ce_loss_on_tape(&mut tape, z, target)?;
    Ok(tape.scalar(l)?)
}

/// Per-sample loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub sisdr: Var,
    pub ce: Option<Var>,
    pub consistency: Option<Var>,
}

/// Records the weighted total. A term whose weight is zero, or a consistency
/// term whose gate is closed, is left out of the graph entirely.
pub fn total_on_tape(
    tape: &mut Tape,
    terms: &LossTerms,
    w: &LossWeights,
    gate_open: bool,
) -> Result<Var> {
    let mut total = tape.scale(terms.sisdr, w.sisdr_weight())?;
    if let (Some(ce), true) = (terms.ce, w.beta > 0.0) {
        let t = tape.scale(ce, w.beta)?;
        total = tape.add(total, t)?;
    }
    if let (Some(c), true, true) = (terms.consistency, w.lambda > 0.0, gate_open) {
        let t = tape.scale(c, w.lambda)?;
        total = tape.add(total, t)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
