use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState, Snapshot};
use super::step::{train_step, Objective, PreparedSample, StepContext, TrainState};
use super::{lr_at, ConsistencyMode, EncoderMode, TrainConfig};
use crate::corpus::{Corpus, MixtureSample, Split};
use crate::digest::item_seed;
use crate::error::{Error, Result};
use crate::losses::{build_centroid_bank, CentroidBank, LossBreakdown};
use crate::model::{
    encode_speaker, Architecture, EmbeddingPair, SeparatorParams, SpeakerEncoderParams,
};

pub const LOG_HEADER: &str =
    "step,epoch,lr,omega,gate_open_fraction,l_sisdr,l_ce,l_consistency,secs_mean,total";

/// Batch means of one optimiser step. `l_consistency` is the mean of the
/// consistency term as it entered each total, so the weighted sum of the
/// component columns gives `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub omega: f64,
    pub gate_open_fraction: f64,
    pub l_sisdr: f64,
    pub l_ce: f64,
    pub l_consistency: f64,
    pub secs_mean: f64,
    pub total: f64,
}

impl LogRow {
    pub fn from_breakdowns(step: u64, epoch: usize, lr: f64, rows: &[LossBreakdown]) -> Self {
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&LossBreakdown) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            step,
            epoch,
            lr,
            omega: rows.first().map_or(1.0, |b| b.omega),
            gate_open_fraction: mean(&|b| if b.gate_open { 1.0 } else { 0.0 }),
            l_sisdr: mean(&|b| b.l_sisdr),
            l_ce: mean(&|b| b.l_ce),
            l_consistency: mean(&|b| b.gated_consistency()),
            secs_mean: mean(&|b| b.secs.unwrap_or(f64::NAN)),
            total: mean(&|b| b.total),
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.omega,
            self.gate_open_fraction,
            self.l_sisdr,
            self.l_ce,
            self.l_consistency,
            self.secs_mean,
            self.total
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("malformed log row {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad());
        }
        let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            lr: x(2)?,
            omega: x(3)?,
            gate_open_fraction: x(4)?,
            l_sisdr: x(5)?,
            l_ce: x(6)?,
            l_consistency: x(7)?,
            secs_mean: x(8)?,
            total: x(9)?,
        })
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.to_csv()).unwrap();
    }
    out
}

pub fn parse_log(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Invalid(
            "training log has an unexpected header".into(),
        ));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(LogRow::parse_csv)
        .collect()
}

/// Inputs of a training run besides the corpus.
#[derive(Clone, Debug)]
pub struct TrainSetup<'a> {
    pub arch: &'a Architecture,
    pub cfg: &'a TrainConfig,
    /// Pretrained reference encoder. Required in frozen mode.
    pub pretrained: Option<&'a SpeakerEncoderParams>,
    /// Centroids of the pretrained encoder, used in frozen centroid mode.
    /// Built from `pretrained` when absent.
    pub bank: Option<&'a CentroidBank>,
    pub config_hash: &'a str,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// One per epoch, in order.
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRow>,
}

/// Class index of each training speaker: its position in the sorted roster.
pub fn class_indices(corpus: &Corpus) -> BTreeMap<u32, usize> {
    corpus
        .speakers(Split::Train)
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect()
}

/// Training utterances grouped by speaker.
pub fn speaker_groups(
    corpus: &Corpus,
    split: Split,
) -> BTreeMap<u32, Vec<&crate::audio::Waveform>> {
    let mut groups: BTreeMap<u32, Vec<_>> = BTreeMap::new();
    for (spk, w) in corpus.labelled_utterances(split) {
        groups.entry(spk).or_default().push(w);
    }
    groups
}

fn enrollment_pool<'c>(corpus: &'c Corpus, s: &MixtureSample) -> Vec<&'c str> {
    corpus
        .utterances_of(s.target_speaker)
        .into_iter()
        .filter(|u| *u != s.target_utterance)
        .collect()
}

fn prepare_epoch(
    corpus: &Corpus,
    samples: &[MixtureSample],
    cues: Option<&BTreeMap<String, EmbeddingPair>>,
    setup: &TrainSetup<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PreparedSample>> {
    let segment_len =
        (setup.cfg.segment_seconds * f64::from(corpus.sample_rate())).round() as usize;
    samples
        .iter()
        .map(|s| {
            let pool = enrollment_pool(corpus, s);
            if pool.is_empty() {
                return Err(Error::Invalid(format!(
                    "no enrollment candidates for {}",
                    s.sample_id
                )));
            }
            let id = pool[rng.random_range(0..pool.len())];
            let cue = match cues {
                Some(c) => Some(
                    c.get(id)
                        .cloned()
                        .ok_or_else(|| Error::Invalid(format!("no cached cue for {id}")))?,
                ),
                None => None,
            };
            PreparedSample::new(
                s,
                corpus.audio(id)?.clone(),
                cue,
                segment_len,
                setup.arch,
                rng,
            )
        })
        .collect()
}

/// Runs the configured number of epochs over the training mixtures.
/// `progress` sees every epoch's checkpoint and log rows as they finish.
pub fn train_run(
    corpus: &Corpus,
    setup: &TrainSetup<'_>,
    mut progress: impl FnMut(&Checkpoint, &[LogRow]),
) -> Result<TrainOutcome> {
    let cfg = setup.cfg;
    cfg.validate()?;
    let arch = setup.arch;
    let joint = cfg.encoder_mode == EncoderMode::Joint;
    let centroid = cfg.consistency_mode == ConsistencyMode::Centroid;

    let encoder = match (cfg.encoder_mode, setup.pretrained) {
        (EncoderMode::Frozen, Some(p)) => p.clone(),
        (EncoderMode::Frozen, None) => {
            return Err(Error::Config(
                "frozen mode needs a pretrained encoder".into(),
            ));
        }
        (EncoderMode::Joint, _) => {
            SpeakerEncoderParams::init(item_seed(cfg.seed, "encoder-init", 0), &arch.config)
        }
    };
    encoder.validate(&arch.config)?;
    let separator = SeparatorParams::init(item_seed(cfg.seed, "separator-init", 0), &arch.config);
    let rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, "train", 0));
    let mut state = TrainState::new(&encoder, &separator, rng);
    let frozen_fp = encoder.0.fingerprint();

    let samples = corpus.samples(Split::Train)?;
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let schedule = cfg.cls.schedule((cfg.epochs * steps_per_epoch) as u64)?;
    let classes = class_indices(corpus);
    let groups = speaker_groups(corpus, Split::Train);

    let cues = if joint {
        None
    } else {
        let mut cache = BTreeMap::new();
        for s in &samples {
            for id in enrollment_pool(corpus, s) {
                if !cache.contains_key(id) {
                    cache.insert(
                        id.to_string(),
                        encode_speaker(corpus.audio(id)?, &encoder, arch)?,
                    );
                }
            }
        }
        Some(cache)
    };
    let mut bank = match (centroid, joint, setup.bank) {
        (true, false, Some(b)) => {
            if b.fingerprint() != frozen_fp {
                return Err(Error::Invalid(
                    "centroid bank was built with a different encoder".into(),
                ));
            }
            Some(b.clone())
        }
        (true, false, None) => Some(build_centroid_bank(&encoder, arch, &groups)?),
        _ => None,
    };

    let snapshot = Snapshot {
        model: arch.config.clone(),
        train: Some(cfg.clone()),
        pretrain: None,
    };
    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    let mut log = Vec::new();
    let mut global_step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        if centroid && joint {
            bank = Some(build_centroid_bank(&state.encoder(), arch, &groups)?);
        }
        let prepared = prepare_epoch(corpus, &samples, cues.as_ref(), setup, &mut state.rng)?;
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut state.rng);
        let ctx = StepContext {
            arch,
            cfg,
            schedule: &schedule,
            bank: bank.as_ref(),
            classes: &classes,
        };
        let first_row = log.len();
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &prepared[i]).collect();
            let report = train_step(
                &batch,
                &mut state,
                &ctx,
                global_step,
                lr,
                Objective::Configured,
            )?;
            let rows: Vec<LossBreakdown> = report.breakdowns.iter().map(|(_, b)| *b).collect();
            log.push(LogRow::from_breakdowns(global_step, epoch, lr, &rows));
            global_step += 1;
        }
        if !joint && state.encoder().0.fingerprint() != frozen_fp {
            return Err(Error::Invalid(format!(
                "frozen encoder changed during epoch {epoch}"
            )));
        }
        let ckpt = Checkpoint {
            config_hash: setup.config_hash.to_string(),
            epoch,
            snapshot: snapshot.clone(),
            rng: RngState::of(&state.rng),
            params: state.params.clone(),
        };
        progress(&ckpt, &log[first_row..]);
        checkpoints.push(ckpt);
    }
    Ok(TrainOutcome { checkpoints, log })
}

/// Writes one checkpoint per epoch and `train_log.csv` into `dir`.
pub fn write_outcome(outcome: &TrainOutcome, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for c in &outcome.checkpoints {
        c.save(dir.join(checkpoint_file_name(c.epoch)))?;
    }
    let path = dir.join(LOG_FILE);
    std::fs::write(&path, log_to_csv(&outcome.log)).map_err(Error::io(&path))
}

pub const LOG_FILE: &str = "train_log.csv";

pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("epoch{epoch:03}.ckpt")
}
