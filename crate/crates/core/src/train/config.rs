use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ClsSchedule, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Pretrained encoder bound as constants.
    Frozen,
    /// Encoder trained from scratch alongside the separator.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyMode {
    None,
    /// `1 − SECS` between enrollment and estimate.
    Sc,
    /// Softmax over cosines to the speaker centroids.
    Centroid,
}

macro_rules! text_enum {
    ($t:ty { $($v:ident => $s:literal),* }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),* })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok(Self::$v),)*
                    other => Err(format!("unknown value {other:?}")),
                }
            }
        }
    };
}

text_enum!(EncoderMode { Frozen => "frozen", Joint => "joint" });
text_enum!(ConsistencyMode { None => "none", Sc => "sc", Centroid => "centroid" });

/// Conditional suppression settings; the step count comes from the run length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClsConfig {
    pub enabled: bool,
    pub omega_start: f64,
    pub omega_end: f64,
}

impl Default for ClsConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            omega_start: 1.0,
            omega_end: 0.8,
        }
    }
}

impl ClsConfig {
    pub fn schedule(&self, total_steps: u64) -> Result<ClsSchedule> {
        let s = ClsSchedule {
            omega_start: self.omega_start,
            omega_end: self.omega_end,
            total_steps,
            enabled: self.enabled,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub segment_seconds: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weights: LossWeights,
    pub cls: ClsConfig,
    pub encoder_mode: EncoderMode,
    pub consistency_mode: ConsistencyMode,
    pub seed: u64,
    pub batch_size: usize,
    pub checkpoint_avg_k: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            segment_seconds: 2.0,
            lr_start: 1e-3,
            lr_end: 2.5e-5,
            weights: LossWeights {
                beta: 0.0,
                lambda: 0.0,
            },
            cls: ClsConfig::default(),
            encoder_mode: EncoderMode::Frozen,
            consistency_mode: ConsistencyMode::None,
            seed: 0,
            batch_size: 8,
            checkpoint_avg_k: 5,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    /// Weight of each term implied by the two ablation axes: β = 0.1 when
    /// the encoder trains, λ = 0.1 when a consistency loss is used.
    pub fn weights_for(encoder: EncoderMode, consistency: ConsistencyMode) -> LossWeights {
        LossWeights {
            beta: if encoder == EncoderMode::Joint {
                0.1
            } else {
                0.0
            },
            lambda: if consistency == ConsistencyMode::None {
                0.0
            } else {
                0.1
            },
        }
    }

    pub fn with_modes(
        mut self,
        encoder: EncoderMode,
        consistency: ConsistencyMode,
        cls: bool,
    ) -> Self {
        self.encoder_mode = encoder;
        self.consistency_mode = consistency;
        self.weights = Self::weights_for(encoder, consistency);
        self.cls.enabled = cls;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.cls.schedule(1)?;
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_avg_k == 0 {
            return bad("epochs, batch_size and checkpoint_avg_k must be positive".into());
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return bad(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        if !(self.segment_seconds > 0.0) || !(self.clip_norm > 0.0) {
            return bad("segment_seconds and clip_norm must be positive".into());
        }
        if self.encoder_mode == EncoderMode::Frozen && self.weights.beta != 0.0 {
            return bad("a frozen encoder has no classification loss; beta must be 0".into());
        }
        if self.consistency_mode == ConsistencyMode::None && self.weights.lambda != 0.0 {
            return bad("lambda must be 0 without a consistency loss".into());
        }
        if self.consistency_mode != ConsistencyMode::None && self.weights.lambda == 0.0 {
            return bad("a consistency loss needs lambda > 0".into());
        }
        Ok(())
    }
}

/// Learning rate of `epoch`, geometric from `lr_start` to `lr_end`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Invalid(format!(
            "epoch {epoch} outside a {}-epoch run",
            cfg.epochs
        )));
    }
    if epoch == 0 || cfg.epochs == 1 {
        return Ok(cfg.lr_start);
    }
    if epoch == cfg.epochs - 1 {
        return Ok(cfg.lr_end);
    }
    let t = epoch as f64 / (cfg.epochs - 1) as f64;
    Ok(cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub target_accuracy: f64,
    /// Below this at the cap, the run is an error rather than a weak encoder.
    pub min_accuracy: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Length of the random crop taken from each utterance per epoch.
    pub crop_seconds: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            target_accuracy: 0.95,
            min_accuracy: 0.6,
            lr: 2e-3,
            batch_size: 8,
            crop_seconds: 0.8,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0
            || self.batch_size == 0
            || !(self.lr > 0.0)
            || !(self.crop_seconds > 0.0)
        {
            return Err(Error::Config(
                "pretraining needs positive epochs, batch, lr and crop".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) || !(0.0..=1.0).contains(&self.min_accuracy)
        {
            return Err(Error::Config("accuracies are fractions in [0, 1]".into()));
        }
        Ok(())
    }
}
