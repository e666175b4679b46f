use std::collections::BTreeMap;

use crate::diffgraph::{Gradients, Tensor};
use crate::error::{Error, Result};
use crate::model::Params;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments, one pair per parameter seen so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update of every parameter named in `grads`.
pub fn adam_step(
    params: &mut Params,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Invalid(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient {name}[{i}]"),
                sample: "batch".into(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        let mut out = p.to_vec();
        for (((x, &gi), mi), vi) in out
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        params.insert(name, Tensor::new(p.shape().to_vec(), out)?);
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: Gradients, max_norm: f64) -> (Gradients, f64) {
    let norm = grads.global_norm();
    if norm > max_norm {
        (grads.scaled(max_norm / norm), norm)
    } else {
        (grads, norm)
    }
}
