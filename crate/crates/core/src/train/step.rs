use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, clip_global_norm, AdamState};
use super::{ConsistencyMode, EncoderMode, TrainConfig};
use crate::audio::Waveform;
use crate::corpus::MixtureSample;
use crate::diffgraph::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{
    c_sc_loss_on_tape, ce_loss_on_tape, cls_combined_loss, sc_loss_on_tape, secs,
    si_sdr_loss_on_tape, total_on_tape, CentroidBank, ClsSchedule, LossBreakdown, LossTerms,
};
use crate::model::{
    classify_on_tape, encode_on_tape, encode_wave_on_tape, separate_on_tape, Architecture,
    EmbeddingPair, MaskHook, MixtureFeatures, Params, SeparatorParams, SpeakerEncoderParams,
    UnitEmbedding, UnitVar,
};

/// Everything the optimiser carries between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Encoder (`enc.*`) and separator (`sep.*`) tensors.
    pub params: Params,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(
        encoder: &SpeakerEncoderParams,
        separator: &SeparatorParams,
        rng: ChaCha8Rng,
    ) -> Self {
        Self {
            params: encoder.0.merged(&separator.0),
            adam: AdamState::new(),
            rng,
        }
    }

    pub fn encoder(&self) -> SpeakerEncoderParams {
        SpeakerEncoderParams(self.params.with_prefix("enc."))
    }

    pub fn separator(&self) -> SeparatorParams {
        SeparatorParams(self.params.with_prefix("sep."))
    }
}

/// Fixed inputs of a step.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub arch: &'a Architecture,
    pub cfg: &'a TrainConfig,
    pub schedule: &'a ClsSchedule,
    /// Present exactly when the centroid consistency loss is used.
    pub bank: Option<&'a CentroidBank>,
    /// Classifier output index of each training speaker.
    pub classes: &'a BTreeMap<u32, usize>,
}

/// Which objective the gradients come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Objective {
    #[default]
    Configured,
    /// The configured objective with the consistency term dropped for every
    /// sample, as a reference for the suppression checks.
    WithoutConsistency,
}

/// One training item after cropping and enrollment selection.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub speaker: u32,
    pub features: MixtureFeatures,
    pub target: Vec<f64>,
    pub enrollment: Waveform,
    /// Cue computed once by a frozen encoder; `None` when it is encoded on the tape.
    pub cue: Option<EmbeddingPair>,
}

/// Random window of at most `max_len` samples, the same for every signal.
pub fn crop_offsets(len: usize, max_len: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    if len <= max_len {
        return (0, len);
    }
    let start = rng.random_range(0..=len - max_len);
    (start, start + max_len)
}

impl PreparedSample {
    /// Crops `sample` to the training segment and attaches `enrollment`.
    pub fn new(
        sample: &MixtureSample,
        enrollment: Waveform,
        cue: Option<EmbeddingPair>,
        segment_len: usize,
        arch: &Architecture,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (a, b) = crop_offsets(sample.mixture.len(), segment_len, rng);
        let rate = sample.mixture.sample_rate();
        let mixture = Waveform::new(sample.mixture.samples()[a..b].to_vec(), rate)?;
        Ok(Self {
            id: sample.sample_id.clone(),
            speaker: sample.target_speaker,
            features: MixtureFeatures::new(&mixture, arch)?,
            target: sample.target.samples()[a..b].to_vec(),
            enrollment,
            cue,
        })
    }
}

fn unit_of(tape: &Tape, v: UnitVar) -> Result<UnitEmbedding> {
    UnitEmbedding::new(tape.value(v.0).clone())
}

/// Records one sample's training objective on `tape` and returns its
/// breakdown with the total node. Encoder tensors are leaves only in joint mode.
pub fn record_sample_loss(
    tape: &mut Tape,
    sample: &PreparedSample,
    params: &Params,
    ctx: &StepContext<'_>,
    global_step: u64,
    objective: Objective,
) -> Result<(LossBreakdown, Var)> {
    let cfg = ctx.cfg;
    let joint = cfg.encoder_mode == EncoderMode::Joint;
    let enc = params.with_prefix("enc.").bind(tape, joint);
    let sep = params.with_prefix("sep.").bind(tape, true);

    let (cue, ce) = match (&sample.cue, joint) {
        (Some(pair), false) => (UnitVar(tape.constant(pair.unit.tensor().clone())), None),
        (None, true) => {
            let e = encode_on_tape(tape, ctx.arch, &enc, &sample.enrollment)?;
            let class = *ctx.classes.get(&sample.speaker).ok_or_else(|| {
                Error::Invalid(format!("speaker {} has no class index", sample.speaker))
            })?;
            let logits = classify_on_tape(tape, &enc, e.pre_norm)?;
            (e.unit, Some(ce_loss_on_tape(tape, logits, class)?))
        }
        _ => {
            return Err(Error::Invalid(format!(
                "sample {} carries a cached cue that does not match the encoder mode",
                sample.id
            )))
        }
    };

    let out = separate_on_tape(
        tape,
        ctx.arch,
        &sep,
        &sample.features,
        cue,
        MaskHook::Learned,
    )?;
    let sisdr = si_sdr_loss_on_tape(tape, out.estimate, &sample.target)?;
    let est = encode_wave_on_tape(tape, ctx.arch, &enc, out.estimate, sample.features.len)?;
    if let Err(e) = tape.check_finite() {
        return Err(Error::NonFinite {
            what: e.to_string(),
            sample: sample.id.clone(),
        });
    }
    let secs_value = secs(&unit_of(tape, cue)?, &unit_of(tape, est.unit)?)?;

    let consistency = match cfg.consistency_mode {
        ConsistencyMode::None => None,
        ConsistencyMode::Sc => Some(sc_loss_on_tape(tape, cue, est.unit)?),
        ConsistencyMode::Centroid => {
            let bank = ctx
                .bank
                .ok_or_else(|| Error::Invalid("the centroid loss needs a centroid bank".into()))?;
            Some(c_sc_loss_on_tape(tape, est.unit, bank, sample.speaker)?)
        }
    };
    let value = |v: Option<Var>| -> Result<f64> { v.map_or(Ok(0.0), |v| Ok(tape.scalar(v)?)) };
    let breakdown = cls_combined_loss(
        tape.scalar(sisdr)?,
        value(ce)?,
        value(consistency)?,
        secs_value,
        &cfg.weights,
        ctx.schedule,
        global_step,
    )?;
    let terms = LossTerms {
        sisdr,
        ce,
        consistency,
    };
    let gate = breakdown.gate_open && objective == Objective::Configured;
    let total = total_on_tape(tape, &terms, &cfg.weights, gate)?;
    if !tape.scalar(total)?.is_finite() {
        return Err(Error::NonFinite {
            what: "loss".into(),
            sample: sample.id.clone(),
        });
    }
    Ok((breakdown, total))
}

/// Loss breakdown and parameter gradients of one sample.
pub fn sample_gradients(
    sample: &PreparedSample,
    params: &Params,
    ctx: &StepContext<'_>,
    global_step: u64,
    objective: Objective,
) -> Result<(LossBreakdown, Gradients)> {
    let mut tape = Tape::new();
    let (breakdown, total) =
        record_sample_loss(&mut tape, sample, params, ctx, global_step, objective)?;
    let grads = tape.backward(total).map_err(|e| Error::NonFinite {
        what: e.to_string(),
        sample: sample.id.clone(),
    })?;
    Ok((breakdown, grads))
}

/// Per-sample breakdowns of a step, in batch order, and the pre-clip gradient norm.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub breakdowns: Vec<(String, LossBreakdown)>,
    pub grad_norm: f64,
}

/// Forward, backward and one Adam update over `batch`. Gradients are summed
/// in sample-id order, averaged, clipped and applied.
pub fn train_step(
    batch: &[&PreparedSample],
    state: &mut TrainState,
    ctx: &StepContext<'_>,
    global_step: u64,
    lr: f64,
    objective: Objective,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if ctx.bank.is_some() != (ctx.cfg.consistency_mode == ConsistencyMode::Centroid) {
        return Err(Error::Invalid(
            "a centroid bank is required exactly for the centroid loss".into(),
        ));
    }
    let mut results = batch
        .iter()
        .map(|s| {
            Ok((
                s.id.clone(),
                sample_gradients(s, &state.params, ctx, global_step, objective)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let breakdowns = results
        .iter()
        .map(|(id, (b, _))| (id.clone(), *b))
        .collect();
    results.sort_by(|a, b| a.0.cmp(&b.0));
    let mut sum = Gradients::from_map(BTreeMap::new());
    for (_, (_, g)) in &results {
        sum.accumulate(g)?;
    }
    let mean = sum.scaled(1.0 / batch.len() as f64);
    let (grads, grad_norm) = clip_global_norm(mean, ctx.cfg.clip_norm);
    adam_step(&mut state.params, &grads, &mut state.adam, lr)?;
    Ok(StepReport {
        breakdowns,
        grad_norm,
    })
}
