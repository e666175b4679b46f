//! Extraction metrics over a held-out split and the report files built from them.

use std::collections::BTreeMap;
use std::path::Path;

use crate::audio::Waveform;
use crate::corpus::{Corpus, MixtureSample, Split};
use crate::losses::{si_sdr_unclamped, SI_SDR_EPS};
use crate::model::{
    encode_speaker, separate_with, Architecture, MaskHook, SeparatorParams, SpeakerEncoderParams,
};
use crate::train::Checkpoint;
use crate::{Error, Result};


/// Improvement threshold, in dB, above which an item counts as extracted.
pub const SUCCESS_DB: f64 = 1.0;

pub const ROWS_FILE: &str = "eval_rows.csv";
pub const SUMMARY_FILE: &str = "eval_summary.txt";
pub const ROWS_HEADER: &str =
    "sample_id,mixture_id,target_speaker,si_sdr_db,si_sdri_db,success,similarity,sdr_db";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub sample_id: String,
    pub mixture_id: String,
    pub target_speaker: u32,
    pub si_sdr_db: f64,
    pub si_sdri_db: f64,
    pub success: bool,
    /// Scorer cosine in [-1, 1].
    pub similarity: f64,
    pub sdr_db: f64,
}

impl MetricRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.sample_id,
            self.mixture_id,
            self.target_speaker,
            self.si_sdr_db,
            self.si_sdri_db,
            u8::from(self.success),
            self.similarity,
            self.sdr_db
        )
    }

    fn parse_csv(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(format!("expected 8 fields, found {}", f.len()));
        }
        let num = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|e| format!("field {}: {e}", i + 1))
        };
        let row = MetricRow {
            sample_id: f[0].to_string(),
            mixture_id: f[1].to_string(),
            target_speaker: f[2].parse().map_err(|e| format!("target speaker: {e}"))?,
            si_sdr_db: num(3)?,
            si_sdri_db: num(4)?,
            success: match f[5] {
                "1" => true,
                "0" => false,
                other => return Err(format!("success flag {other:?}")),
            },
            similarity: num(6)?,
            sdr_db: num(7)?,
        };
        if row.success != (row.si_sdri_db > SUCCESS_DB) {
            return Err("success flag disagrees with si_sdri".into());
        }
        Ok(row)
    }
}

/// Means over rows. Accuracy and similarity are percentages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregates {
    pub si_sdr_db: f64,
    pub si_sdri_db: f64,
    pub accuracy_pct: f64,
    pub similarity_pct: f64,
    pub sdr_db: f64,
}

impl Aggregates {
    pub fn from_rows(rows: &[MetricRow]) -> Result<Self> {
        let accuracy = extraction_accuracy(rows)?;
        let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        Ok(Self {
            si_sdr_db: mean(|r| r.si_sdr_db),
            si_sdri_db: mean(|r| r.si_sdri_db),
            accuracy_pct: 100.0 * accuracy,
            similarity_pct: 100.0 * mean(|r| r.similarity),
            sdr_db: mean(|r| r.sdr_db),
        })
    }
}

/// Where a report's numbers came from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub corpus_hash: String,
    /// Fingerprint of the evaluated parameters.
    pub checkpoint: String,
    pub scorer: String,
    /// Free-form run label, e.g. the ablation axes.
    pub label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub aggregates: Aggregates,
    pub provenance: Provenance,
}

impl EvalReport {
    pub fn new(rows: Vec<MetricRow>, provenance: Provenance) -> Result<Self> {
        let aggregates = Aggregates::from_rows(&rows)?;
        Ok(Self {
            rows,
            aggregates,
            provenance,
        })
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::from(ROWS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let a = &self.aggregates;
        let p = &self.provenance;
        format!(
            "SI_SDR={}\nSI_SDRi={}\nAcc={}\nSim={}\nSDR={}\nrows={}\nlabel={}\nconfig_hash={}\ncorpus_hash={}\ncheckpoint={}\nscorer={}\n",
            a.si_sdr_db,
            a.si_sdri_db,
            a.accuracy_pct,
            a.similarity_pct,
            a.sdr_db,
            self.rows.len(),
            p.label,
            p.config_hash,
            p.corpus_hash,
            p.checkpoint,
            p.scorer
        )
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let rows = dir.join(ROWS_FILE);
        std::fs::write(&rows, self.rows_csv()).map_err(Error::io(&rows))?;
        let summary = dir.join(SUMMARY_FILE);
        std::fs::write(&summary, self.summary_text()).map_err(Error::io(&summary))
    }

    /// Reads a report back and checks that the summary matches its rows.
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let rows_path = dir.join(ROWS_FILE);
        let text = std::fs::read_to_string(&rows_path).map_err(Error::io(&rows_path))?;
        let mut lines = text.lines();
        if lines.next() != Some(ROWS_HEADER) {
            return Err(Error::parse(&rows_path, 1, "unexpected header"));
        }
        let rows = lines
            .enumerate()
            .map(|(i, l)| MetricRow::parse_csv(l).map_err(|m| Error::parse(&rows_path, i + 2, m)))
            .collect::<Result<Vec<_>>>()?;

        let summary_path = dir.join(SUMMARY_FILE);
        let text = std::fs::read_to_string(&summary_path).map_err(Error::io(&summary_path))?;
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(&summary_path, i + 1, "expected key=value"))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::parse(&summary_path, 0, format!("missing key {k}")))
        };
        let provenance = Provenance {
            config_hash: get("config_hash")?,
            corpus_hash: get("corpus_hash")?,
            checkpoint: get("checkpoint")?,
            scorer: get("scorer")?,
            label: get("label")?,
        };
        let report = Self::new(rows, provenance)?;
        if report.summary_text() != text {
            return Err(Error::Invalid(format!(
                "{} does not match the rows in {}",
                summary_path.display(),
                rows_path.display()
            )));
        }
        Ok(report)
    }
}

/// SI-SDR of the estimate minus SI-SDR of the unprocessed mixture, both unclamped.
pub fn si_sdri(est: &[f64], mix: &[f64], reference: &[f64]) -> Result<f64> {
    if mix.len() != reference.len() {
        return Err(Error::Invalid(format!(
            "mixture has {} samples, reference {}",
            mix.len(),
            reference.len()
        )));
    }
    Ok(si_sdr_unclamped(est, reference)? - si_sdr_unclamped(mix, reference)?)
}

/// Plain signal-to-distortion ratio with no scale projection.
pub fn sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Invalid(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    let signal: f64 = reference.iter().map(|r| r * r).sum();
    if !(signal > 0.0) {
        return Err(Error::Invalid("reference has zero energy".into()));
    }
    let noise: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, r)| (r - e).powi(2))
        .sum();
    Ok(10.0 * (signal / (noise + SI_SDR_EPS)).log10())
}

/// Fraction of rows whose improvement is strictly above [`SUCCESS_DB`].
pub fn extraction_accuracy(rows: &[MetricRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Invalid("no rows to score".into()));
    }
    Ok(rows.iter().filter(|r| r.si_sdri_db > SUCCESS_DB).count() as f64 / rows.len() as f64)
}

/// Cosine between the scorer's unit embeddings of the estimate and the clean target.
pub fn similarity_score(
    est: &Waveform,
    target_clean: &Waveform,
    scorer: &SpeakerEncoderParams,
    arch: &Architecture,
) -> Result<f64> {
    let a = encode_speaker(est, scorer, arch)?;
    let b = encode_speaker(target_clean, scorer, arch)?;
    Ok(a.unit.dot(&b.unit).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    /// Worker threads; 1 runs inline.
    pub threads: usize,
    pub hook: MaskHook,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            hook: MaskHook::Learned,
        }
    }
}

/// Models needed to score one item.
#[derive(Clone, Copy)]
pub struct EvalModels<'a> {
    pub arch: &'a Architecture,
    /// Produces the enrollment cue.
    pub encoder: &'a SpeakerEncoderParams,
    pub separator: &'a SeparatorParams,
    /// Independent pretrained encoder used only for the similarity column.
    pub scorer: &'a SpeakerEncoderParams,
}

pub fn score_sample(
    sample: &MixtureSample,
    models: EvalModels<'_>,
    hook: MaskHook,
) -> Result<MetricRow> {
    let cue = encode_speaker(&sample.enrollment, models.encoder, models.arch)?;
    let (est, _) = separate_with(&sample.mixture, &cue, models.separator, models.arch, hook)?;
    let (e, m, r) = (
        est.samples(),
        sample.mixture.samples(),
        sample.target.samples(),
    );
    let si_sdr_db = si_sdr_unclamped(e, r)?;
    let si_sdri_db = si_sdri(e, m, r)?;
    let row = MetricRow {
        sample_id: sample.sample_id.clone(),
        mixture_id: sample.mixture_id.clone(),
        target_speaker: sample.target_speaker,
        si_sdr_db,
        si_sdri_db,
        success: si_sdri_db > SUCCESS_DB,
        similarity: similarity_score(&est, &sample.target, models.scorer, models.arch)?,
        sdr_db: sdr(e, r)?,
    };
    if ![row.si_sdr_db, row.si_sdri_db, row.similarity, row.sdr_db]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::NonFinite {
            what: "metric".into(),
            sample: sample.sample_id.clone(),
        });
    }
    Ok(row)
}

/// Rows in input order. Threads split the items into contiguous chunks, so
/// the output does not depend on the thread count.
pub fn score_samples(
    samples: &[MixtureSample],
    models: EvalModels<'_>,
    opts: EvalOptions,
) -> Result<Vec<MetricRow>> {
    let threads = opts.threads.max(1).min(samples.len().max(1));
    if threads == 1 {
        return samples
            .iter()
            .map(|s| score_sample(s, models, opts.hook))
            .collect();
    }
    let chunk = samples.len().div_ceil(threads);
    let parts: Vec<Result<Vec<MetricRow>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|c| {
                scope.spawn(move || {
                    c.iter()
                        .map(|s| score_sample(s, models, opts.hook))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Invalid("evaluation worker panicked".into())))
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(samples.len());
    for p in parts {
        rows.extend(p?);
    }
    Ok(rows)
}

/// Scores both items of every mixture in `split` with the checkpoint's
/// encoder and separator.
pub fn evaluate(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    split: Split,
    scorer: &SpeakerEncoderParams,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let arch = Architecture::new(checkpoint.snapshot.model.clone())?;
    let encoder = checkpoint.encoder();
    let separator = checkpoint.separator();
    encoder.validate(&arch.config)?;
    separator.validate(&arch.config)?;
    scorer.validate(&arch.config)?;
    let samples = corpus.samples(split)?;
    let models = EvalModels {
        arch: &arch,
        encoder: &encoder,
        separator: &separator,
        scorer,
    };
    let rows = score_samples(&samples, models, opts)?;
    EvalReport::new(
        rows,
        Provenance {
            config_hash: checkpoint.config_hash.clone(),
            corpus_hash: corpus.hash().to_string(),
            checkpoint: checkpoint.params.fingerprint(),
            scorer: scorer.0.fingerprint(),
            label: String::new(),
        },
    )
}
