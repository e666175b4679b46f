use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::audio::Waveform;
use crate::diffgraph::Tensor;
use crate::error::{Error, Result};
use crate::model::{encode_speaker, Architecture, SpeakerEncoderParams, UnitEmbedding};

pub const BANK_VERSION: u32 = 1;
const MAGIC: &str = "#sctse-centroids";

/// Per-speaker mean of unit embeddings, with the fingerprint of the encoder
/// that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidBank {
    speakers: Vec<u32>,
    /// `N × E`, raw means (not renormalised).
    centroids: Tensor,
    counts: Vec<usize>,
    fingerprint: String,
    /// Embedding-space cosine targets: the centroids renormalised and
    /// transposed to `E × N`.
    directions: Tensor,
}

impl CentroidBank {
    /// Averages each speaker's embeddings. Embeddings are summed in a
    /// canonical order so the result does not depend on how they were listed.
    pub fn from_embeddings(
        groups: &BTreeMap<u32, Vec<UnitEmbedding>>,
        fingerprint: impl Into<String>,
    ) -> Result<Self> {
        let fingerprint = fingerprint.into();
        let dim = groups
            .values()
            .flat_map(|g| g.first())
            .map(|e| e.data().len())
            .next()
            .ok_or_else(|| Error::Invalid("no speakers to build centroids from".into()))?;
        let mut speakers = Vec::new();
        let mut counts = Vec::new();
        let mut rows = Vec::new();
        for (&spk, group) in groups {
            if group.is_empty() {
                return Err(Error::Invalid(format!("speaker {spk} has no utterances")));
            }
            let mut sorted: Vec<&[f64]> = group.iter().map(|e| e.data()).collect();
            if sorted.iter().any(|e| e.len() != dim) {
                return Err(Error::Invalid("embedding dimensions differ".into()));
            }
            sorted.sort_by(|a, b| {
                a.iter()
                    .map(|x| x.to_bits())
                    .cmp(b.iter().map(|x| x.to_bits()))
            });
            let mut sum = vec![0.0; dim];
            for e in &sorted {
                sum.iter_mut().zip(e.iter()).for_each(|(s, x)| *s += x);
            }
            let k = group.len() as f64;
            rows.extend(sum.iter().map(|s| s / k));
            speakers.push(spk);
            counts.push(group.len());
        }
        let centroids = Tensor::matrix(speakers.len(), dim, rows)?;
        Self::assemble(speakers, centroids, counts, fingerprint)
    }

    fn assemble(
        speakers: Vec<u32>,
        centroids: Tensor,
        counts: Vec<usize>,
        fingerprint: String,
    ) -> Result<Self> {
        let (n, dim) = centroids
            .dims2()
            .ok_or_else(|| Error::Invalid("centroid matrix must be 2-D".into()))?;
        if n != speakers.len() || n != counts.len() {
            return Err(Error::Invalid(
                "centroid rows and speaker list disagree".into(),
            ));
        }
        if fingerprint.is_empty() {
            return Err(Error::Invalid(
                "centroid bank needs an encoder fingerprint".into(),
            ));
        }
        if !centroids.is_finite() {
            return Err(Error::Invalid("centroids must be finite".into()));
        }
        let mut dirs = vec![0.0; dim * n];
        for (i, row) in centroids.data().chunks_exact(dim).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::Invalid(format!(
                    "centroid of speaker {} is zero",
                    speakers[i]
                )));
            }
            for (j, x) in row.iter().enumerate() {
                dirs[j * n + i] = x / norm;
            }
        }
        Ok(Self {
            speakers,
            directions: Tensor::matrix(dim, n, dirs)?,
            centroids,
            counts,
            fingerprint,
        })
    }

    pub fn speakers(&self) -> &[u32] {
        &self.speakers
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    pub fn centroids(&self) -> &Tensor {
        &self.centroids
    }

    pub fn centroid(&self, speaker: u32) -> Option<&[f64]> {
        let i = self.index_of(speaker)?;
        let d = self.dim();
        Some(&self.centroids.data()[i * d..(i + 1) * d])
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Unit centroids as columns, `E × N`.
    pub fn directions(&self) -> &Tensor {
        &self.directions
    }

    pub fn index_of(&self, speaker: u32) -> Option<usize> {
        self.speakers.binary_search(&speaker).ok()
    }

    pub fn to_text(&self, config_hash: &str) -> String {
        let mut out = String::new();
        let counts: Vec<String> = self.counts.iter().map(usize::to_string).collect();
        writeln!(
            out,
            "{MAGIC}\tversion={BANK_VERSION}\tdim={}\tspeakers={}\tencoder={}\tconfig={config_hash}\tcounts={}",
            self.dim(),
            self.len(),
            self.fingerprint,
            counts.join(",")
        )
        .unwrap();
        for (i, spk) in self.speakers.iter().enumerate() {
            write!(out, "{spk}").unwrap();
            for x in &self.centroids.data()[i * self.dim()..(i + 1) * self.dim()] {
                write!(out, " {x:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses a bank file, returning it with the config hash it was built under.
    pub fn parse(text: &str, origin: &Path) -> Result<(Self, String)> {
        let err = |line: usize, msg: &str| Error::parse(origin, line, msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty centroid file"))?;
        let mut fields = header.split('\t');
        if fields.next() != Some(MAGIC) {
            return Err(err(1, "not a centroid file"));
        }
        let head: BTreeMap<&str, &str> = fields.filter_map(|f| f.split_once('=')).collect();
        let get = |k: &str| {
            head.get(k)
                .copied()
                .ok_or_else(|| err(1, "incomplete header"))
        };
        if get("version")? != BANK_VERSION.to_string() {
            return Err(err(1, "unsupported centroid file version"));
        }
        let dim: usize = get("dim")?.parse().map_err(|_| err(1, "bad dim"))?;
        let n: usize = get("speakers")?
            .parse()
            .map_err(|_| err(1, "bad speaker count"))?;
        let counts: Vec<usize> = get("counts")?
            .split(',')
            .map(|c| c.parse().map_err(|_| err(1, "bad counts")))
            .collect::<Result<_>>()?;
        let mut speakers = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n * dim);
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let spk: u32 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(i + 2, "bad speaker id"))?;
            let values: Vec<f64> = parts
                .map(|s| s.parse::<f64>().map_err(|_| err(i + 2, "bad value")))
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(err(i + 2, "wrong number of values"));
            }
            speakers.push(spk);
            rows.extend(values);
        }
        if speakers.len() != n || !speakers.windows(2).all(|w| w[0] < w[1]) {
            return Err(err(0, "speaker rows are missing, duplicated or unsorted"));
        }
        let bank = Self::assemble(
            speakers,
            Tensor::matrix(n, dim, rows)?,
            counts,
            get("encoder")?.to_string(),
        )?;
        Ok((bank, get("config")?.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text(config_hash)).map_err(Error::io(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text, path)
    }
}

/// Encodes every utterance and averages per speaker.
pub fn build_centroid_bank(
    encoder: &SpeakerEncoderParams,
    arch: &Architecture,
    groups: &BTreeMap<u32, Vec<&Waveform>>,
) -> Result<CentroidBank> {
    let mut embedded = BTreeMap::new();
    for (&spk, waves) in groups {
        let group = waves
            .iter()
            .map(|w| encode_speaker(w, encoder, arch).map(|e| e.unit))
            .collect::<Result<Vec<_>>>()?;
        embedded.insert(spk, group);
    }
    CentroidBank::from_embeddings(&embedded, encoder.0.fingerprint())
}
