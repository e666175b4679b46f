//! Experiment configuration file: one TOML document for every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::digest::fingerprint_json;
use crate::model::ModelConfig;
use crate::train::{PretrainConfig, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed. Corpus synthesis, pretraining and training all derive from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| {
                text[..s.start.min(text.len())].matches('\n').count() + 1
            });
            Error::parse(origin, line, e.message().to_string())
        })?;
        for (stage, seed) in [("train", cfg.train.seed), ("pretrain", cfg.pretrain.seed)] {
            if seed != 0 && seed != cfg.seed {
                return Err(Error::Config(format!(
                    "{stage}.seed is derived from the top-level seed; set `seed` instead"
                )));
            }
        }
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// Replaces the master seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.pretrain.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        if self.model.num_speakers != self.corpus.train_speakers as usize {
            return Err(Error::Config(format!(
                "model.num_speakers is {} but the corpus has {} training speakers",
                self.model.num_speakers, self.corpus.train_speakers
            )));
        }
        Ok(())
    }

    /// Fingerprint of everything that affects results. The output directory is excluded.
    pub fn config_hash(&self) -> String {
        fingerprint_json(&(
            self.seed,
            &self.corpus,
            &self.model,
            &self.pretrain,
            &self.train,
        ))
    }

    pub fn corpus_hash(&self) -> String {
        self.corpus.corpus_hash(self.seed)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.output_dir.join("corpus")
    }

    pub fn encoder_path(&self) -> PathBuf {
        self.output_dir.join("encoder.ckpt")
    }

    pub fn bank_path(&self) -> PathBuf {
        self.output_dir.join("centroids.bank")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.output_dir.join("runs")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::parse(&cfg.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = ExperimentConfig::parse("seed = 3\n[train]\nepochs = 2\n", Path::new("x.toml"))
            .unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.pretrain.seed, 3);
        assert_eq!(cfg.corpus, CorpusConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "sed = 1\n",
            "[train]\nepoch = 3\n",
            "[nope]\n",
            "[corpus]\nspeakers = 3\n",
        ] {
            let err = ExperimentConfig::parse(text, Path::new("bad.toml")).unwrap_err();
            assert!(matches!(err, Error::Parse { .. }), "{text}: {err}");
        }
        let err =
            ExperimentConfig::parse("seed = 1\n\n[train]\nepochz = 1\n", Path::new("bad.toml"))
                .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn inconsistent_files_are_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("seed = 1\n[train]\nseed = 2\n", Path::new("x")),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("[model]\nnum_speakers = 5\n", Path::new("x")),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::parse("[train]\nlr_start = 1e-6\n", Path::new("x")).is_err());
    }

    #[test]
    fn hash_tracks_results_not_paths() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.epochs = 3;
        assert_ne!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.set_seed(9);
        assert_ne!(a.corpus_hash(), c.corpus_hash());
    }
}
