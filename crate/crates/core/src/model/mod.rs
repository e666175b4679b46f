//! Speaker encoder and embedding-conditioned band-mask separator.
//!
//! Both networks are written once, against the tape. The value-level
//! functions ([`encode_speaker`], [`separate`], [`classify`]) build a
//! throwaway tape with every parameter bound as a constant.

mod encoder;
mod params;
mod separator;

use serde::{Deserialize, Serialize};

use crate::audio::{BandPlan, StftConfig};
use crate::diffgraph::{Tensor, Var};
use crate::error::{Error, Result};

pub use encoder::{
    classify, classify_on_tape, encode_on_tape, encode_speaker, encode_wave_on_tape,
};
pub use params::{init_params, Bound, Params, SeparatorParams, SpeakerEncoderParams};
pub use separator::{
    separate, separate_on_tape, separate_with, MaskHook, MixtureFeatures, SeparationVars,
};

/// Log-power floor shared by both networks' front ends.
pub const LOG_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub window_length: usize,
    pub hop: usize,
    /// Band widths low to high; empty selects the default eight-band plan.
    pub band_widths: Vec<usize>,
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub feature_dim: usize,
    pub depth: usize,
    pub num_speakers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window_length: 256,
            hop: 128,
            band_widths: Vec::new(),
            embed_dim: 32,
            encoder_hidden: 64,
            feature_dim: 32,
            depth: 2,
            num_speakers: 32,
        }
    }
}

impl ModelConfig {
    pub fn bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    pub fn band_plan(&self) -> Result<BandPlan> {
        let plan = if self.band_widths.is_empty() {
            BandPlan::desk_default(self.bins())?
        } else {
            BandPlan::from_widths(&self.band_widths)?
        };
        if plan.bins() != self.bins() {
            return Err(Error::Config(format!(
                "band widths cover {} bins, the STFT has {}",
                plan.bins(),
                self.bins()
            )));
        }
        Ok(plan)
    }

    pub fn band_widths(&self) -> Vec<usize> {
        self.band_plan().map(|p| p.widths()).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        self.band_plan()?;
        StftConfig::hann(self.window_length, self.hop)?;
        if [
            self.embed_dim,
            self.encoder_hidden,
            self.feature_dim,
            self.num_speakers,
        ]
        .contains(&0)
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// A validated [`ModelConfig`] with its STFT and band plan built.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    stft: StftConfig,
    plan: BandPlan,
}

impl Architecture {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            stft: StftConfig::hann(config.window_length, config.hop)?,
            plan: config.band_plan()?,
            config,
        })
    }

    pub fn stft(&self) -> &StftConfig {
        &self.stft
    }

    pub fn plan(&self) -> &BandPlan {
        &self.plan
    }
}

/// Pooled encoder output before normalisation; the classifier reads this.
#[derive(Clone, Debug, PartialEq)]
pub struct PreNorm(Tensor);

/// L2-normalised embedding; the cosine losses read this.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitEmbedding(Tensor);

impl PreNorm {
    pub fn new(t: Tensor) -> Self {
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

impl UnitEmbedding {
    pub const TOLERANCE: f64 = 1e-9;

    /// Rejects vectors whose norm is not 1 within [`Self::TOLERANCE`].
    pub fn new(t: Tensor) -> Result<Self> {
        let norm = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::Invalid(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self(t))
    }

    pub fn normalized(t: &Tensor) -> Result<Self> {
        let norm = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Invalid("cannot normalise a zero vector".into()));
        }
        Ok(Self(t.map(|x| x / norm)))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn dot(&self, other: &UnitEmbedding) -> f64 {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair {
    pub pre_norm: PreNorm,
    pub unit: UnitEmbedding,
}

/// Tape handle of a [`PreNorm`].
#[derive(Clone, Copy, Debug)]
pub struct PreNormVar(pub Var);

/// Tape handle of a [`UnitEmbedding`].
#[derive(Clone, Copy, Debug)]
pub struct UnitVar(pub Var);

#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    pub pre_norm: PreNormVar,
    pub unit: UnitVar,
}
