use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PretrainConfig, TrainConfig};
use crate::diffgraph::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params, SeparatorParams, SpeakerEncoderParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "#sctse-checkpoint";

/// Serialisable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    fn to_text(self) -> String {
        let seed: String = self.seed.iter().map(|b| format!("{b:02x}")).collect();
        format!(
            "seed={seed}\tstream={}\tword_pos={}",
            self.stream, self.word_pos
        )
    }

    fn parse(fields: &BTreeMap<&str, &str>) -> Option<Self> {
        let hex = fields.get("seed")?;
        if hex.len() != 64 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).ok()?;
        }
        Some(Self {
            seed,
            stream: fields.get("stream")?.parse().ok()?,
            word_pos: fields.get("word_pos")?.parse().ok()?,
        })
    }
}

/// Settings a checkpoint was produced under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub epoch: usize,
    pub snapshot: Snapshot,
    pub rng: RngState,
    /// Encoder (`enc.*`) and separator (`sep.*`) tensors.
    pub params: Params,
}

impl Checkpoint {
    pub fn encoder(&self) -> SpeakerEncoderParams {
        SpeakerEncoderParams(self.params.with_prefix("enc."))
    }

    pub fn separator(&self) -> SeparatorParams {
        SeparatorParams(self.params.with_prefix("sep."))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{MAGIC}\tversion={CHECKPOINT_VERSION}\tconfig={}\tepoch={}",
            self.config_hash, self.epoch
        )
        .unwrap();
        writeln!(out, "#rng\t{}", self.rng.to_text()).unwrap();
        let json = serde_json::to_string(&self.snapshot).expect("snapshot serialises");
        writeln!(out, "#snapshot\t{json}").unwrap();
        for (name, t) in self.params.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            write!(out, "{name}\t{}\t", shape.join("x")).unwrap();
            for (i, x) in t.data().iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write!(out, "{x:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: &str| Error::parse(origin, line, msg);
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| err(1, "empty checkpoint"))?;
        let mut f = head.split('\t');
        if f.next() != Some(MAGIC) {
            return Err(err(1, "not a checkpoint"));
        }
        let head: BTreeMap<&str, &str> = f.filter_map(|x| x.split_once('=')).collect();
        if head.get("version") != Some(&CHECKPOINT_VERSION.to_string().as_str()) {
            return Err(err(1, "unsupported checkpoint version"));
        }
        let config_hash = head
            .get("config")
            .ok_or_else(|| err(1, "missing config hash"))?
            .to_string();
        let epoch = head
            .get("epoch")
            .and_then(|e| e.parse().ok())
            .ok_or_else(|| err(1, "bad epoch"))?;
        let rng_line = lines
            .next()
            .and_then(|l| l.strip_prefix("#rng\t"))
            .ok_or_else(|| err(2, "missing rng"))?;
        let rng_fields: BTreeMap<&str, &str> = rng_line
            .split('\t')
            .filter_map(|x| x.split_once('='))
            .collect();
        let rng = RngState::parse(&rng_fields).ok_or_else(|| err(2, "bad rng state"))?;
        let snap_line = lines
            .next()
            .and_then(|l| l.strip_prefix("#snapshot\t"))
            .ok_or_else(|| err(3, "missing snapshot"))?;
        let snapshot: Snapshot =
            serde_json::from_str(snap_line).map_err(|e| err(3, &e.to_string()))?;
        let mut params = Params::new();
        for (i, line) in lines.enumerate() {
            let n = i + 4;
            if line.is_empty() {
                continue;
            }
            let mut cols = line.splitn(3, '\t');
            let (Some(name), Some(shape), Some(values)) = (cols.next(), cols.next(), cols.next())
            else {
                return Err(err(n, "expected name, shape and values"));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse().map_err(|_| err(n, "bad shape")))
                .collect::<Result<_>>()?;
            let data: Vec<f64> = values
                .split(' ')
                .map(|v| v.parse().map_err(|_| err(n, "bad value")))
                .collect::<Result<_>>()?;
            let t = Tensor::new(shape, data)
                .map_err(|_| err(n, "value count does not match the shape"))?;
            params.insert(name, t);
        }
        Ok(Self {
            config_hash,
            epoch,
            snapshot,
            rng,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(Error::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text, path)
    }
}

/// Element-wise mean of every parameter across `checkpoints`, taken as
/// `x₀ + Σ(xᵢ − x₀)/K` so that equal inputs come back bit for bit. The
/// last checkpoint supplies the metadata.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let (last, first) = match (checkpoints.last(), checkpoints.first()) {
        (Some(l), Some(f)) => (l, f),
        _ => return Err(Error::Invalid("nothing to average".into())),
    };
    for c in checkpoints {
        if !c.params.names().eq(first.params.names()) {
            return Err(Error::Invalid(
                "checkpoints carry different parameter sets".into(),
            ));
        }
        if c.config_hash != first.config_hash {
            return Err(Error::Invalid(
                "checkpoints come from different configurations".into(),
            ));
        }
    }
    let k = checkpoints.len() as f64;
    let mut params = Params::new();
    for (name, base) in first.params.iter() {
        let mut acc = vec![0.0; base.len()];
        for c in checkpoints {
            let t = c.params.get(name)?;
            if t.shape() != base.shape() {
                return Err(Error::Invalid(format!(
                    "parameter {name} changes shape across checkpoints"
                )));
            }
            for ((a, x), b) in acc.iter_mut().zip(t.data()).zip(base.data()) {
                *a += x - b;
            }
        }
        let data = base
            .data()
            .iter()
            .zip(&acc)
            .map(|(b, a)| b + a / k)
            .collect();
        params.insert(name, Tensor::new(base.shape().to_vec(), data)?);
    }
    Ok(Checkpoint {
        params,
        ..last.clone()
    })
}
