use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use super::{make_speaker, Resonance, SpeakerProfile};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const MAGIC: &str = "#sctse-corpus";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerRecord {
    pub profile: SpeakerProfile,
    /// `Train` for speakers whose utterances feed train and valid mixtures.
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: u32,
    /// Relative to the corpus directory.
    pub path: String,
    pub num_samples: usize,
    pub duration_ms: u64,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureRecord {
    pub id: String,
    pub split: Split,
    pub utterances: [String; 2],
    pub speakers: [u32; 2],
    /// Level of the first utterance over the second.
    pub snr_db: f64,
    /// Enrollment for extracting speaker `speakers[k]`.
    pub enrollments: [String; 2],
    pub duration_ms: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub master_seed: u64,
    pub config_hash: String,
    pub sample_rate: u32,
    pub speakers: Vec<SpeakerRecord>,
    pub utterances: Vec<UtteranceRecord>,
    pub mixtures: Vec<MixtureRecord>,
}

fn extras(pairs: &[(&str, String)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn resonance_text(r: &Resonance) -> String {
    format!("{}:{}:{}", r.center_hz, r.bandwidth_hz, r.gain)
}

impl CorpusManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{MAGIC}\tversion={MANIFEST_VERSION}\tseed={}\tconfig={}\tsample_rate={}",
            self.master_seed, self.config_hash, self.sample_rate
        )
        .unwrap();
        writeln!(out, "#kind\tid\tspeaker\tpath\tduration_ms\tsplit\textras").unwrap();
        for s in &self.speakers {
            let p = &s.profile;
            let ex = extras(&[
                ("f0", p.f0_base.to_string()),
                ("jitter", p.f0_jitter.to_string()),
                ("r1", resonance_text(&p.resonances[0])),
                ("r2", resonance_text(&p.resonances[1])),
                ("r3", resonance_text(&p.resonances[2])),
                ("breath", p.breathiness.to_string()),
                ("seed", p.seed.to_string()),
            ]);
            writeln!(
                out,
                "speaker\tspk{0:03}\t{0}\t-\t0\t{1}\t{ex}",
                p.speaker_id, s.split
            )
            .unwrap();
        }
        for u in &self.utterances {
            let ex = extras(&[
                ("samples", u.num_samples.to_string()),
                ("seed", u.seed.to_string()),
            ]);
            writeln!(
                out,
                "utterance\t{}\t{}\t{}\t{}\t{}\t{ex}",
                u.id, u.speaker, u.path, u.duration_ms, u.split
            )
            .unwrap();
        }
        for m in &self.mixtures {
            let ex = extras(&[
                ("utt1", m.utterances[0].clone()),
                ("utt2", m.utterances[1].clone()),
                ("snr_db", m.snr_db.to_string()),
                ("enroll1", m.enrollments[0].clone()),
                ("enroll2", m.enrollments[1].clone()),
            ]);
            writeln!(
                out,
                "mixture\t{}\t{}+{}\t-\t{}\t{}\t{ex}",
                m.id, m.speakers[0], m.speakers[1], m.duration_ms, m.split
            )
            .unwrap();
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::parse(origin, line, msg);
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| err(1, "empty manifest".into()))?;
        let mut fields = header.split('\t');
        if fields.next() != Some(MAGIC) {
            return Err(err(1, "not a corpus manifest".into()));
        }
        let head: BTreeMap<&str, &str> = fields.filter_map(|f| f.split_once('=')).collect();
        let get = |k: &str| {
            head.get(k)
                .copied()
                .ok_or_else(|| err(1, format!("header lacks {k}")))
        };
        let version: u32 = get("version")?
            .parse()
            .map_err(|_| err(1, "bad version".into()))?;
        if version != MANIFEST_VERSION {
            return Err(err(1, format!("unsupported manifest version {version}")));
        }
        let master_seed: u64 = get("seed")?
            .parse()
            .map_err(|_| err(1, "bad seed".into()))?;
        let config_hash = get("config")?.to_string();
        let sample_rate: u32 = get("sample_rate")?
            .parse()
            .map_err(|_| err(1, "bad sample rate".into()))?;

        let mut manifest = CorpusManifest {
            master_seed,
            config_hash,
            sample_rate,
            speakers: Vec::new(),
            utterances: Vec::new(),
            mixtures: Vec::new(),
        };
        for (idx, line) in lines {
            let n = idx + 1;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 7 {
                return Err(err(n, format!("expected 7 fields, found {}", cols.len())));
            }
            let ex: BTreeMap<&str, &str> = cols[6]
                .split(';')
                .filter_map(|f| f.split_once('='))
                .collect();
            let key = |k: &str| {
                ex.get(k)
                    .copied()
                    .ok_or_else(|| err(n, format!("missing {k}")))
            };
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| err(n, format!("bad number {s:?}")))
            };
            let int = |s: &str| {
                s.parse::<u64>()
                    .map_err(|_| err(n, format!("bad integer {s:?}")))
            };
            let split: Split = cols[5].parse().map_err(|e| err(n, e))?;
            let duration_ms = int(cols[4])?;
            match cols[0] {
                "speaker" => {
                    let res = |k: &str| -> Result<Resonance> {
                        let parts: Vec<&str> = key(k)?.split(':').collect();
                        if parts.len() != 3 {
                            return Err(err(n, format!("bad resonance {k}")));
                        }
                        Ok(Resonance {
                            center_hz: num(parts[0])?,
                            bandwidth_hz: num(parts[1])?,
                            gain: num(parts[2])?,
                        })
                    };
                    let speaker_id = int(cols[2])? as u32;
                    let profile = SpeakerProfile {
                        speaker_id,
                        f0_base: num(key("f0")?)?,
                        f0_jitter: num(key("jitter")?)?,
                        resonances: [res("r1")?, res("r2")?, res("r3")?],
                        breathiness: num(key("breath")?)?,
                        seed: int(key("seed")?)?,
                    };
                    if profile != make_speaker(speaker_id, master_seed) {
                        return Err(err(
                            n,
                            format!("speaker {speaker_id} does not match the master seed"),
                        ));
                    }
                    manifest.speakers.push(SpeakerRecord { profile, split });
                }
                "utterance" => manifest.utterances.push(UtteranceRecord {
                    id: cols[1].to_string(),
                    speaker: int(cols[2])? as u32,
                    path: cols[3].to_string(),
                    num_samples: int(key("samples")?)? as usize,
                    duration_ms,
                    split,
                    seed: int(key("seed")?)?,
                }),
                "mixture" => {
                    let (a, b) = cols[2]
                        .split_once('+')
                        .ok_or_else(|| err(n, "bad speaker pair".into()))?;
                    manifest.mixtures.push(MixtureRecord {
                        id: cols[1].to_string(),
                        split,
                        utterances: [key("utt1")?.to_string(), key("utt2")?.to_string()],
                        speakers: [int(a)? as u32, int(b)? as u32],
                        snr_db: num(key("snr_db")?)?,
                        enrollments: [key("enroll1")?.to_string(), key("enroll2")?.to_string()],
                        duration_ms,
                    });
                }
                other => return Err(err(n, format!("unknown record kind {other:?}"))),
            }
        }
        manifest.validate().map_err(|m| err(0, m))?;
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(Error::io(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text, path)
    }

    pub fn utterance(&self, id: &str) -> Option<&UtteranceRecord> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn speaker_split(&self, speaker: u32) -> Option<Split> {
        self.speakers
            .iter()
            .find(|s| s.profile.speaker_id == speaker)
            .map(|s| s.split)
    }

    /// Speakers whose utterances belong to `split` (train speakers for `Valid`).
    pub fn roster(&self, split: Split) -> Vec<u32> {
        let pool = if split == Split::Test {
            Split::Test
        } else {
            Split::Train
        };
        self.speakers
            .iter()
            .filter(|s| s.split == pool)
            .map(|s| s.profile.speaker_id)
            .collect()
    }

    pub fn mixtures_in(&self, split: Split) -> impl Iterator<Item = &MixtureRecord> {
        self.mixtures.iter().filter(move |m| m.split == split)
    }

    /// Structural invariants: known references, disjoint speaker splits and
    /// enrollments that never reuse the in-mixture utterance.
    pub fn validate(&self) -> Result<(), String> {
        let utts: BTreeMap<&str, &UtteranceRecord> =
            self.utterances.iter().map(|u| (u.id.as_str(), u)).collect();
        if utts.len() != self.utterances.len() {
            return Err("duplicate utterance id".into());
        }
        for u in &self.utterances {
            match self.speaker_split(u.speaker) {
                Some(s) if s == u.split => {}
                _ => {
                    return Err(format!(
                        "utterance {} has an unknown speaker or split",
                        u.id
                    ))
                }
            }
        }
        for m in &self.mixtures {
            let pool = if m.split == Split::Test {
                Split::Test
            } else {
                Split::Train
            };
            if m.speakers[0] == m.speakers[1] {
                return Err(format!("mixture {} pairs a speaker with itself", m.id));
            }
            for k in 0..2 {
                let u = utts
                    .get(m.utterances[k].as_str())
                    .ok_or(format!("mixture {} lacks utterance", m.id))?;
                let e = utts
                    .get(m.enrollments[k].as_str())
                    .ok_or(format!("mixture {} lacks enrollment", m.id))?;
                if u.speaker != m.speakers[k] || e.speaker != m.speakers[k] {
                    return Err(format!("mixture {} has a speaker mismatch", m.id));
                }
                if u.id == e.id {
                    return Err(format!("mixture {} enrolls with its own utterance", m.id));
                }
                if u.split != pool || e.split != pool {
                    return Err(format!("mixture {} crosses the train/test boundary", m.id));
                }
            }
        }
        Ok(())
    }
}
