use std::sync::Arc;

use super::{Architecture, Bound, EmbeddingPair, SeparatorParams, UnitVar, LOG_EPS};
use crate::audio::{stft, IstftMap, Waveform};
use crate::diffgraph::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Mixture-side inputs of the separator; constant data on every tape.
#[derive(Clone, Debug)]
pub struct MixtureFeatures {
    pub len: usize,
    pub padded_len: usize,
    pub frames: usize,
    /// `frames × bins` real part of the padded mixture's STFT.
    pub re: Tensor,
    pub im: Tensor,
    /// Standardised log power, `frames × bins`.
    pub feat: Tensor,
}

impl MixtureFeatures {
    pub fn new(mix: &Waveform, arch: &Architecture) -> Result<Self> {
        let cfg = arch.stft();
        if mix.len() < cfg.window_length() {
            return Err(Error::Invalid(format!(
                "mixture of {} samples is shorter than one analysis window",
                mix.len()
            )));
        }
        let padded_len = cfg.padded_length(mix.len());
        let mut samples = mix.samples().to_vec();
        samples.resize(padded_len, 0.0);
        let spec = stft(&Waveform::new(samples, mix.sample_rate())?, cfg)?;
        let (frames, bins) = (spec.frames(), spec.bins());
        let logp: Vec<f64> = spec.power().iter().map(|p| (p + LOG_EPS).ln()).collect();
        let n = logp.len() as f64;
        let mean = logp.iter().sum::<f64>() / n;
        let var = logp.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-3);
        let feat = logp.iter().map(|x| (x - mean) / std).collect();
        Ok(Self {
            len: mix.len(),
            padded_len,
            frames,
            re: Tensor::matrix(frames, bins, spec.re().to_vec())?,
            im: Tensor::matrix(frames, bins, spec.im().to_vec())?,
            feat: Tensor::matrix(frames, bins, feat)?,
        })
    }
}

/// Replaces the learned mask, for reconstruction checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskHook {
    #[default]
    Learned,
    /// Mask of exactly one everywhere: the separator passes the mixture through.
    Ones,
}

#[derive(Clone, Copy, Debug)]
pub struct SeparationVars {
    /// `1 × len` estimate.
    pub estimate: Var,
    /// `frames × bins` mask in (0, 1).
    pub mask: Var,
}

fn gru(
    tape: &mut Tape,
    p: &Bound,
    block: usize,
    x: Var,
    frames: usize,
    bands: usize,
    d: usize,
) -> Result<Var> {
    let wx = p.var(&format!("sep.block{block}.wx"))?;
    let b = p.var(&format!("sep.block{block}.b"))?;
    let wh = p.var(&format!("sep.block{block}.wh"))?;
    let gx = tape.matmul(x, wx)?;
    let gx = tape.add(gx, b)?;
    let mut h = tape.constant(Tensor::zeros(&[bands, d]));
    let mut outs = Vec::with_capacity(frames);
    for t in 0..frames {
        let g = tape.slice(gx, 0, t * bands, (t + 1) * bands)?;
        let hu = tape.matmul(h, wh)?;
        let gzr = tape.slice(g, 1, 0, 2 * d)?;
        let hzr = tape.slice(hu, 1, 0, 2 * d)?;
        let zr = tape.add(gzr, hzr)?;
        let zr = tape.sigmoid(zr)?;
        let z = tape.slice(zr, 1, 0, d)?;
        let r = tape.slice(zr, 1, d, 2 * d)?;
        let gn = tape.slice(g, 1, 2 * d, 3 * d)?;
        let hn = tape.slice(hu, 1, 2 * d, 3 * d)?;
        let rn = tape.mul(r, hn)?;
        let n = tape.add(gn, rn)?;
        let n = tape.tanh(n)?;
        // h' = (1 - z)·n + z·h
        let diff = tape.sub(h, n)?;
        let gated = tape.mul(z, diff)?;
        h = tape.add(n, gated)?;
        outs.push(h);
    }
    Ok(tape.concat(&outs, 0)?)
}

pub fn separate_on_tape(
    tape: &mut Tape,
    arch: &Architecture,
    p: &Bound,
    mix: &MixtureFeatures,
    cue: UnitVar,
    hook: MaskHook,
) -> Result<SeparationVars> {
    let (frames, bins) = (mix.frames, arch.config.bins());
    let d = arch.config.feature_dim;
    let plan = arch.plan();
    let bands = plan.len();
    let re = tape.constant(mix.re.clone());
    let im = tape.constant(mix.im.clone());

    let mask = match hook {
        MaskHook::Ones => tape.constant(Tensor::filled(&[frames, bins], 1.0)),
        MaskHook::Learned => {
            let feat = tape.constant(mix.feat.clone());
            let mut per_band = Vec::with_capacity(bands);
            for (k, r) in plan.ranges().iter().enumerate() {
                let xb = tape.slice(feat, 1, r.start, r.end)?;
                let w = p.var(&format!("sep.band{k}.w"))?;
                let b = p.var(&format!("sep.band{k}.b"))?;
                let y = tape.matmul(xb, w)?;
                per_band.push(tape.add(y, b)?);
            }
            let y = tape.concat(&per_band, 1)?;
            let y = tape.tanh(y)?;

            let cw = p.var("sep.cond.w")?;
            let cb = p.var("sep.cond.b")?;
            let cond = tape.matmul(cue.0, cw)?;
            let cond = tape.add(cond, cb)?;
            let scale = tape.slice(cond, 1, 0, bands * d)?;
            let gain = tape.add_scalar(scale, 1.0)?;
            let shift = tape.slice(cond, 1, bands * d, 2 * bands * d)?;
            let y = tape.mul(y, gain)?;
            let y = tape.add(y, shift)?;

            let mut x = tape.reshape(y, &[frames * bands, d])?;
            for block in 0..arch.config.depth {
                let h = gru(tape, p, block, x, frames, bands, d)?;
                x = tape.add(x, h)?;
            }
            let x = tape.reshape(x, &[frames, bands * d])?;
            let mut heads = Vec::with_capacity(bands);
            for k in 0..bands {
                let xk = tape.slice(x, 1, k * d, (k + 1) * d)?;
                let w = p.var(&format!("sep.head{k}.w"))?;
                let b = p.var(&format!("sep.head{k}.b"))?;
                let y = tape.matmul(xk, w)?;
                heads.push(tape.add(y, b)?);
            }
            let logits = tape.concat(&heads, 1)?;
            tape.sigmoid(logits)?
        }
    };

    let est_re = tape.mul(mask, re)?;
    let est_im = tape.mul(mask, im)?;
    let spec = tape.concat(&[est_re, est_im], 1)?;
    let synth = IstftMap::new(arch.stft().clone(), frames, mix.padded_len)?;
    let padded = tape.linear(Arc::new(synth), spec)?;
    let estimate = tape.slice(padded, 1, 0, mix.len)?;
    Ok(SeparationVars { estimate, mask })
}

/// Estimate and mask for one mixture, with an optional mask override.
pub fn separate_with(
    mix: &Waveform,
    e: &EmbeddingPair,
    p: &SeparatorParams,
    arch: &Architecture,
    hook: MaskHook,
) -> Result<(Waveform, Tensor)> {
    let feats = MixtureFeatures::new(mix, arch)?;
    let mut tape = Tape::new();
    let bound = p.0.bind(&mut tape, false);
    let cue = tape.constant(e.unit.tensor().clone());
    let out = separate_on_tape(&mut tape, arch, &bound, &feats, UnitVar(cue), hook)?;
    tape.check_finite()?;
    let wave = Waveform::new(tape.value(out.estimate).to_vec(), mix.sample_rate())?;
    Ok((wave, tape.value(out.mask).clone()))
}

pub fn separate(
    mix: &Waveform,
    e: &EmbeddingPair,
    p: &SeparatorParams,
    arch: &Architecture,
) -> Result<Waveform> {
    Ok(separate_with(mix, e, p, arch, MaskHook::Learned)?.0)
}
