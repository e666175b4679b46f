use std::sync::Arc;

use super::{
    Architecture, Bound, EmbeddingPair, EmbeddingVars, PreNorm, PreNormVar, SpeakerEncoderParams,
    UnitEmbedding, UnitVar, LOG_EPS,
};
use crate::audio::{StftMap, Waveform};
use crate::diffgraph::{Tape, Tensor, Var};
use crate::error::Result;

/// Log-power features are centred per utterance and scaled into tanh's range.
const FEATURE_SCALE: f64 = 0.2;
const STD_FLOOR: f64 = 1e-5;

fn affine(tape: &mut Tape, p: &Bound, layer: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{layer}.w"))?;
    let b = p.var(&format!("{layer}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// Embeds the `1 × len` signal `wave` already on the tape.
pub fn encode_wave_on_tape(
    tape: &mut Tape,
    arch: &Architecture,
    p: &Bound,
    wave: Var,
    len: usize,
) -> Result<EmbeddingVars> {
    let bins = arch.config.bins();
    let map = StftMap::new(arch.stft().clone(), len)?;
    let spec = tape.linear(Arc::new(map), wave)?;
    let re = tape.slice(spec, 1, 0, bins)?;
    let im = tape.slice(spec, 1, bins, 2 * bins)?;
    let re2 = tape.square(re)?;
    let im2 = tape.square(im)?;
    let power = tape.add(re2, im2)?;
    let floored = tape.add_scalar(power, LOG_EPS)?;
    let logp = tape.log(floored)?;
    let mu = tape.mean_all(logp)?;
    let centred = tape.sub(logp, mu)?;
    let mut h = tape.scale(centred, FEATURE_SCALE)?;
    for layer in ["enc.proj", "enc.hidden0", "enc.hidden1"] {
        let a = affine(tape, p, layer, h)?;
        h = tape.tanh(a)?;
    }
    let mean = tape.mean(h, 0)?;
    let dev = tape.sub(h, mean)?;
    let sq = tape.square(dev)?;
    let var = tape.mean(sq, 0)?;
    let var = tape.add_scalar(var, STD_FLOOR)?;
    let std = tape.sqrt(var)?;
    let pooled = tape.concat(&[mean, std], 1)?;
    let pre = affine(tape, p, "enc.pool", pooled)?;
    let unit = tape.normalize(pre)?;
    Ok(EmbeddingVars {
        pre_norm: PreNormVar(pre),
        unit: UnitVar(unit),
    })
}

/// Embeds a waveform that is data (not a function of other tape values).
pub fn encode_on_tape(
    tape: &mut Tape,
    arch: &Architecture,
    p: &Bound,
    w: &Waveform,
) -> Result<EmbeddingVars> {
    let wave = tape.constant(Tensor::row_from(w.samples()));
    encode_wave_on_tape(tape, arch, p, wave, w.len())
}

pub fn classify_on_tape(tape: &mut Tape, p: &Bound, e: PreNormVar) -> Result<Var> {
    affine(tape, p, "enc.cls", e.0)
}

pub fn encode_speaker(
    w: &Waveform,
    p: &SpeakerEncoderParams,
    arch: &Architecture,
) -> Result<EmbeddingPair> {
    let mut tape = Tape::new();
    let bound = p.0.bind(&mut tape, false);
    let e = encode_on_tape(&mut tape, arch, &bound, w)?;
    tape.check_finite()?;
    Ok(EmbeddingPair {
        pre_norm: PreNorm::new(tape.value(e.pre_norm.0).clone()),
        unit: UnitEmbedding::new(tape.value(e.unit.0).clone())?,
    })
}

/// Speaker logits from the pre-normalisation features.
pub fn classify(e: &EmbeddingPair, p: &SpeakerEncoderParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = p.0.bind(&mut tape, false);
    let pre = tape.constant(e.pre_norm.tensor().clone());
    let logits = classify_on_tape(&mut tape, &bound, PreNormVar(pre))?;
    Ok(tape.value(logits).clone())
}
