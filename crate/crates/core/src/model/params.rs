use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::diffgraph::{Tape, Tensor, Var};
use crate::digest::{fingerprint_params, item_seed};
use crate::error::{Error, Result};

/// Named parameter tensors in a fixed (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        Self(map)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.0
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.0
    }

    pub fn scalar_count(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Bit-exact content fingerprint.
    pub fn fingerprint(&self) -> String {
        fingerprint_params(self.iter().map(|(k, v)| (k, v.data())))
    }

    /// Splits off entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Params {
        Params(
            self.0
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }

    pub fn merged(&self, other: &Params) -> Params {
        let mut out = self.0.clone();
        out.extend(other.0.iter().map(|(k, v)| (k.clone(), v.clone())));
        Params(out)
    }

    /// Puts every tensor on `tape`, as trainable parameters or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.0
                .iter()
                .map(|(k, v)| {
                    let var = if trainable {
                        tape.param(k.clone(), v.clone())
                    } else {
                        tape.constant(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        )
    }

    /// Checks names and shapes against `expected`.
    pub fn check_layout(&self, expected: &BTreeMap<String, Vec<usize>>) -> Result<()> {
        if self.0.len() != expected.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.0.len()
            )));
        }
        for (name, shape) in expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Invalid(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Invalid(format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }
}

/// Tape handles of a bound [`Params`].
#[derive(Clone, Debug)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter {name} is not bound")))
    }
}

/// Weights `U(-√(3/fan_in), √(3/fan_in))`; names ending in `.b` start at zero.
fn init_layout(layout: &BTreeMap<String, Vec<usize>>, seed: u64) -> Params {
    let mut out = Params::new();
    for (name, shape) in layout {
        let len: usize = shape.iter().product();
        let data = if name.ends_with(".b") {
            vec![0.0; len]
        } else {
            let fan_in = shape[0] as f64;
            let bound = (3.0 / fan_in).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, name, 0));
            (0..len).map(|_| rng.random_range(-bound..bound)).collect()
        };
        out.insert(
            name.clone(),
            Tensor::new(shape.clone(), data).expect("layout shapes are positive"),
        );
    }
    out
}

/// Speaker encoder plus its classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEncoderParams(pub Params);

/// Band-mask separator.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparatorParams(pub Params);

impl SpeakerEncoderParams {
    pub fn layout(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        let (b, h, e, n) = (
            cfg.bins(),
            cfg.encoder_hidden,
            cfg.embed_dim,
            cfg.num_speakers,
        );
        [
            ("enc.proj.w", vec![b, h]),
            ("enc.proj.b", vec![1, h]),
            ("enc.hidden0.w", vec![h, h]),
            ("enc.hidden0.b", vec![1, h]),
            ("enc.hidden1.w", vec![h, h]),
            ("enc.hidden1.b", vec![1, h]),
            ("enc.pool.w", vec![2 * h, e]),
            ("enc.pool.b", vec![1, e]),
            ("enc.cls.w", vec![e, n]),
            ("enc.cls.b", vec![1, n]),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn init(seed: u64, cfg: &ModelConfig) -> Self {
        Self(init_layout(
            &Self::layout(cfg),
            item_seed(seed, "encoder", 0),
        ))
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.0.check_layout(&Self::layout(cfg))
    }
}

impl SeparatorParams {
    pub fn layout(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        let d = cfg.feature_dim;
        let widths = cfg.band_widths();
        let mut out = BTreeMap::new();
        for (k, &w) in widths.iter().enumerate() {
            out.insert(format!("sep.band{k}.w"), vec![w, d]);
            out.insert(format!("sep.band{k}.b"), vec![1, d]);
            out.insert(format!("sep.head{k}.w"), vec![d, w]);
            out.insert(format!("sep.head{k}.b"), vec![1, w]);
        }
        out.insert(
            "sep.cond.w".into(),
            vec![cfg.embed_dim, 2 * widths.len() * d],
        );
        out.insert("sep.cond.b".into(), vec![1, 2 * widths.len() * d]);
        for r in 0..cfg.depth {
            out.insert(format!("sep.block{r}.wx"), vec![d, 3 * d]);
            out.insert(format!("sep.block{r}.b"), vec![1, 3 * d]);
            out.insert(format!("sep.block{r}.wh"), vec![d, 3 * d]);
        }
        out
    }

    pub fn init(seed: u64, cfg: &ModelConfig) -> Self {
        Self(init_layout(
            &Self::layout(cfg),
            item_seed(seed, "separator", 0),
        ))
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.0.check_layout(&Self::layout(cfg))
    }
}

/// Deterministic initial parameters for both networks.
pub fn init_params(seed: u64, cfg: &ModelConfig) -> (SpeakerEncoderParams, SeparatorParams) {
    (
        SpeakerEncoderParams::init(seed, cfg),
        SeparatorParams::init(seed, cfg),
    )
}
