use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, clip_global_norm, AdamState};
use super::checkpoint::{Checkpoint, RngState, Snapshot};
use super::run::class_indices;
use super::step::crop_offsets;
use super::PretrainConfig;
use crate::audio::Waveform;
use crate::corpus::{Corpus, Split};
use crate::diffgraph::{Gradients, Tape};
use crate::digest::item_seed;
use crate::error::{Error, Result};
use crate::losses::ce_loss_on_tape;
use crate::model::{
    classify, classify_on_tape, encode_on_tape, encode_speaker, Architecture, SpeakerEncoderParams,
};

const CLIP_NORM: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Full-utterance classification accuracy after the epoch.
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoder: SpeakerEncoderParams,
    pub history: Vec<PretrainEpoch>,
    pub rng: RngState,
}

impl PretrainOutcome {
    pub fn accuracy(&self) -> f64 {
        self.history.last().map_or(0.0, |h| h.accuracy)
    }

    pub fn to_checkpoint(
        &self,
        arch: &Architecture,
        cfg: &PretrainConfig,
        config_hash: &str,
    ) -> Checkpoint {
        Checkpoint {
            config_hash: config_hash.to_string(),
            epoch: self.history.len().saturating_sub(1),
            snapshot: Snapshot {
                model: arch.config.clone(),
                train: None,
                pretrain: Some(cfg.clone()),
            },
            rng: self.rng,
            params: self.encoder.0.clone(),
        }
    }
}

/// Fraction of `(speaker, utterance)` pairs whose arg-max logit is the speaker's class.
pub fn classification_accuracy(
    encoder: &SpeakerEncoderParams,
    arch: &Architecture,
    items: &[(usize, &Waveform)],
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Invalid("no utterances to classify".into()));
    }
    let mut correct = 0usize;
    for &(class, w) in items {
        let logits = classify(&encode_speaker(w, encoder, arch)?, encoder)?;
        let best = logits
            .data()
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &z)| if z > acc.1 { (i, z) } else { acc },
            );
        correct += usize::from(best.0 == class);
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Trains the encoder and its classifier with cross-entropy on random crops
/// of the training utterances until the target accuracy or the epoch cap.
pub fn pretrain_encoder(
    corpus: &Corpus,
    arch: &Architecture,
    cfg: &PretrainConfig,
    mut progress: impl FnMut(&PretrainEpoch),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let classes = class_indices(corpus);
    if classes.len() != arch.config.num_speakers {
        return Err(Error::Config(format!(
            "the classifier has {} outputs but the corpus has {} training speakers",
            arch.config.num_speakers,
            classes.len()
        )));
    }
    let items: Vec<(usize, &Waveform)> = corpus
        .labelled_utterances(Split::Train)
        .into_iter()
        .map(|(s, w)| (classes[&s], w))
        .collect();
    let crop = (cfg.crop_seconds * f64::from(corpus.sample_rate())).round() as usize;
    let mut params =
        SpeakerEncoderParams::init(item_seed(cfg.seed, "pretrain-init", 0), &arch.config).0;
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, "pretrain", 0));
    let mut history = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut sum = Gradients::from_map(BTreeMap::new());
            for &i in batch {
                let (class, w) = items[i];
                let (a, b) = crop_offsets(w.len(), crop, &mut rng);
                let clip = Waveform::new(w.samples()[a..b].to_vec(), w.sample_rate())?;
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, true);
                let e = encode_on_tape(&mut tape, arch, &bound, &clip)?;
                let logits = classify_on_tape(&mut tape, &bound, e.pre_norm)?;
                let loss = ce_loss_on_tape(&mut tape, logits, class)?;
                let value = tape.scalar(loss)?;
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        what: "pretraining loss".into(),
                        sample: format!("utterance {i}"),
                    });
                }
                loss_sum += value;
                sum.accumulate(&tape.backward(loss)?)?;
            }
            let (grads, _) = clip_global_norm(sum.scaled(1.0 / batch.len() as f64), CLIP_NORM);
            adam_step(&mut params, &grads, &mut adam, cfg.lr)?;
        }
        let encoder = SpeakerEncoderParams(params.clone());
        let record = PretrainEpoch {
            epoch,
            mean_loss: loss_sum / items.len() as f64,
            accuracy: classification_accuracy(&encoder, arch, &items)?,
        };
        progress(&record);
        history.push(record);
        if record.accuracy >= cfg.target_accuracy {
            break;
        }
    }
    let outcome = PretrainOutcome {
        encoder: SpeakerEncoderParams(params),
        history,
        rng: RngState::of(&rng),
    };
    if outcome.accuracy() < cfg.min_accuracy {
        return Err(Error::Invalid(format!(
            "pretraining reached only {:.1}% accuracy in {} epochs",
            100.0 * outcome.accuracy(),
            cfg.max_epochs
        )));
    }
    Ok(outcome)
}

/// Mean cosine between embeddings of the same speaker and of different
/// speakers, over all utterance pairs of `split`.
pub fn margin_probe(
    encoder: &SpeakerEncoderParams,
    arch: &Architecture,
    corpus: &Corpus,
    split: Split,
) -> Result<(f64, f64)> {
    let embedded = corpus
        .labelled_utterances(split)
        .into_iter()
        .map(|(s, w)| Ok((s, encode_speaker(w, encoder, arch)?.unit)))
        .collect::<Result<Vec<_>>>()?;
    let (mut same, mut diff) = ((0.0, 0usize), (0.0, 0usize));
    for (i, (si, ei)) in embedded.iter().enumerate() {
        for (sj, ej) in &embedded[i + 1..] {
            let c = ei.dot(ej);
            let acc = if si == sj { &mut same } else { &mut diff };
            acc.0 += c;
            acc.1 += 1;
        }
    }
    if same.1 == 0 || diff.1 == 0 {
        return Err(Error::Invalid(
            "the probe needs two utterances of one speaker and two speakers".into(),
        ));
    }
    Ok((same.0 / same.1 as f64, diff.0 / diff.1 as f64))
}
