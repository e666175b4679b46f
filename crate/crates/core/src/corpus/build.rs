use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{CorpusManifest, MixtureRecord, SpeakerRecord, Split, UtteranceRecord};
use super::{make_mixture, make_speaker, synth_utterance, MixtureSample};
use crate::audio::{read_wav, write_wav, Waveform, DEFAULT_SAMPLE_RATE};
use crate::digest::{fingerprint_json, item_seed};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub sample_rate: u32,
    pub train_speakers: u32,
    pub train_utterances: u32,
    pub test_speakers: u32,
    pub test_utterances: u32,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub train_mixtures: usize,
    pub valid_mixtures: usize,
    pub test_mixtures: usize,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            train_speakers: 32,
            train_utterances: 12,
            test_speakers: 8,
            test_utterances: 8,
            min_duration_s: 1.0,
            max_duration_s: 2.0,
            train_mixtures: 400,
            valid_mixtures: 20,
            test_mixtures: 100,
            snr_db_min: -3.0,
            snr_db_max: 3.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.train_speakers < 2 || self.test_speakers < 2 {
            return bad("each split needs at least two speakers");
        }
        if self.train_utterances < 2 || self.test_utterances < 2 {
            return bad("each speaker needs at least two utterances so enrollment can differ");
        }
        if !(self.min_duration_s >= super::synth::MIN_DURATION_S
            && self.max_duration_s >= self.min_duration_s)
        {
            return bad("durations must satisfy 0.5 <= min <= max");
        }
        if !(self.snr_db_min.is_finite()
            && self.snr_db_max.is_finite()
            && self.snr_db_min <= self.snr_db_max)
        {
            return bad("snr range must be finite and ordered");
        }
        Ok(())
    }

    /// Fingerprint of this configuration together with the master seed.
    pub fn corpus_hash(&self, master_seed: u64) -> String {
        fingerprint_json(&(self, master_seed))
    }
}

fn duration_ms(samples: usize, rate: u32) -> u64 {
    (samples as u64 * 1000 + u64::from(rate) / 2) / u64::from(rate)
}

fn draw_mixtures(
    split: Split,
    count: usize,
    roster: &[u32],
    by_speaker: &BTreeMap<u32, Vec<&UtteranceRecord>>,
    cfg: &CorpusConfig,
    master_seed: u64,
) -> Vec<MixtureRecord> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(
                master_seed,
                &format!("mixture-{split}"),
                i as u64,
            ));
            let a = rng.random_range(0..roster.len());
            let mut b = rng.random_range(0..roster.len() - 1);
            if b >= a {
                b += 1;
            }
            let speakers = [roster[a], roster[b]];
            let mut pick = |spk: u32| {
                let pool = &by_speaker[&spk];
                let u = rng.random_range(0..pool.len());
                let mut e = rng.random_range(0..pool.len() - 1);
                if e >= u {
                    e += 1;
                }
                (pool[u], pool[e])
            };
            let (u1, e1) = pick(speakers[0]);
            let (u2, e2) = pick(speakers[1]);
            let snr_db = if cfg.snr_db_max > cfg.snr_db_min {
                rng.random_range(cfg.snr_db_min..cfg.snr_db_max)
            } else {
                cfg.snr_db_min
            };
            MixtureRecord {
                id: format!("{split}-{i:04}"),
                split,
                utterances: [u1.id.clone(), u2.id.clone()],
                speakers,
                snr_db,
                enrollments: [e1.id.clone(), e2.id.clone()],
                duration_ms: u1.duration_ms.min(u2.duration_ms),
            }
        })
        .collect()
}

/// Synthesises every utterance under `out_dir/wav/` and writes the manifest.
pub fn build_corpus(
    cfg: &CorpusConfig,
    master_seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<CorpusManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let mut speakers = Vec::new();
    let mut utterances = Vec::new();
    let groups = [
        (Split::Train, 0..cfg.train_speakers, cfg.train_utterances),
        (
            Split::Test,
            cfg.train_speakers..cfg.train_speakers + cfg.test_speakers,
            cfg.test_utterances,
        ),
    ];
    for (split, ids, per_speaker) in groups {
        for id in ids {
            let profile = make_speaker(id, master_seed);
            let dir = out_dir.join("wav").join(format!("spk{id:03}"));
            std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
            for k in 0..per_speaker {
                let index = u64::from(id) * 1_000 + u64::from(k);
                let mut rng = ChaCha8Rng::seed_from_u64(item_seed(master_seed, "duration", index));
                let secs = if cfg.max_duration_s > cfg.min_duration_s {
                    rng.random_range(cfg.min_duration_s..cfg.max_duration_s)
                } else {
                    cfg.min_duration_s
                };
                let seed = item_seed(master_seed, "utterance-seed", index);
                let wave = synth_utterance(&profile, seed, secs, cfg.sample_rate)?;
                let rel = format!("wav/spk{id:03}/u{k:02}.wav");
                write_wav(out_dir.join(&rel), &wave)?;
                utterances.push(UtteranceRecord {
                    id: format!("s{id:03}u{k:02}"),
                    speaker: id,
                    path: rel,
                    num_samples: wave.len(),
                    duration_ms: duration_ms(wave.len(), cfg.sample_rate),
                    split,
                    seed,
                });
            }
            speakers.push(SpeakerRecord { profile, split });
        }
    }

    let mut by_speaker: BTreeMap<u32, Vec<&UtteranceRecord>> = BTreeMap::new();
    for u in &utterances {
        by_speaker.entry(u.speaker).or_default().push(u);
    }
    let train_roster: Vec<u32> = (0..cfg.train_speakers).collect();
    let test_roster: Vec<u32> =
        (cfg.train_speakers..cfg.train_speakers + cfg.test_speakers).collect();
    let mut mixtures = draw_mixtures(
        Split::Train,
        cfg.train_mixtures,
        &train_roster,
        &by_speaker,
        cfg,
        master_seed,
    );
    mixtures.extend(draw_mixtures(
        Split::Valid,
        cfg.valid_mixtures,
        &train_roster,
        &by_speaker,
        cfg,
        master_seed,
    ));
    mixtures.extend(draw_mixtures(
        Split::Test,
        cfg.test_mixtures,
        &test_roster,
        &by_speaker,
        cfg,
        master_seed,
    ));

    let manifest = CorpusManifest {
        master_seed,
        config_hash: cfg.corpus_hash(master_seed),
        sample_rate: cfg.sample_rate,
        speakers,
        utterances,
        mixtures,
    };
    manifest.validate().map_err(Error::Invalid)?;
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A corpus loaded into memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
    audio: BTreeMap<String, Waveform>,
}

impl Corpus {
    /// Loads `dir/manifest.tsv` and every utterance it lists.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let manifest = CorpusManifest::read(root.join(MANIFEST_FILE))?;
        let mut audio = BTreeMap::new();
        for u in &manifest.utterances {
            let wave = read_wav(root.join(&u.path))?;
            if wave.len() != u.num_samples || wave.sample_rate() != manifest.sample_rate {
                return Err(Error::Invalid(format!(
                    "{} does not match its manifest record",
                    u.path
                )));
            }
            audio.insert(u.id.clone(), wave);
        }
        Ok(Self {
            root,
            manifest,
            audio,
        })
    }

    pub fn hash(&self) -> &str {
        &self.manifest.config_hash
    }

    pub fn sample_rate(&self) -> u32 {
        self.manifest.sample_rate
    }

    pub fn audio(&self, utterance: &str) -> Result<&Waveform> {
        self.audio
            .get(utterance)
            .ok_or_else(|| Error::Invalid(format!("unknown utterance {utterance}")))
    }

    /// Utterance ids of one speaker, in manifest order.
    pub fn utterances_of(&self, speaker: u32) -> Vec<&str> {
        self.manifest
            .utterances
            .iter()
            .filter(|u| u.speaker == speaker)
            .map(|u| u.id.as_str())
            .collect()
    }

    /// Speaker roster of a split, sorted by id.
    pub fn speakers(&self, split: Split) -> Vec<u32> {
        self.manifest.roster(split)
    }

    /// All single-speaker utterances of the split's speakers as (speaker, waveform).
    pub fn labelled_utterances(&self, split: Split) -> Vec<(u32, &Waveform)> {
        let roster = self.speakers(split);
        self.manifest
            .utterances
            .iter()
            .filter(|u| roster.contains(&u.speaker))
            .map(|u| (u.speaker, &self.audio[&u.id]))
            .collect()
    }

    /// Both extraction items of every mixture in `split`, in manifest order.
    pub fn samples(&self, split: Split) -> Result<Vec<MixtureSample>> {
        let mut out = Vec::new();
        for m in self.manifest.mixtures_in(split) {
            let u1 = self.audio(&m.utterances[0])?;
            let u2 = self.audio(&m.utterances[1])?;
            let parts = make_mixture(u1, u2, m.snr_db)?;
            // The second item reads the same mixture with the roles swapped.
            let views = [
                (parts.target.clone(), parts.interferer.clone(), m.snr_db),
                (parts.interferer.clone(), parts.target.clone(), -m.snr_db),
            ];
            for (k, (target, interferer, snr_db)) in views.into_iter().enumerate() {
                out.push(MixtureSample {
                    sample_id: format!("{}/{}", m.id, m.speakers[k]),
                    mixture_id: m.id.clone(),
                    mixture: parts.mixture.clone(),
                    target,
                    interferer,
                    enrollment: self.audio(&m.enrollments[k])?.clone(),
                    enrollment_id: m.enrollments[k].clone(),
                    target_utterance: m.utterances[k].clone(),
                    target_speaker: m.speakers[k],
                    snr_db,
                });
            }
        }
        Ok(out)
    }
}
