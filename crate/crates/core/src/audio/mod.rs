//! Signals: waveforms, 16-bit WAV I/O, STFT/iSTFT and band grouping.

mod bands;
mod stft;
mod wav;

use thiserror::Error;

pub use bands::{band_merge, band_split, BandPlan, BandSlice};
pub use stft::{istft, stft, IstftMap, Spectrogram, StftConfig, StftMap};
pub use wav::{read_wav, write_wav};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("expected mono audio, found {0} channels")]
    MultiChannel(u16),
    #[error("sample {index} out of range [-1, 1]: {value}")]
    OutOfRange { index: usize, value: f64 },
    #[error("signal of {len} samples is shorter than one {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("invalid STFT configuration: {0}")]
    InvalidConfig(String),
    #[error("spectrogram inconsistent with its configuration: {0}")]
    Inconsistent(String),
    #[error("invalid band plan: {0}")]
    InvalidBandPlan(String),
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mono signal with its sample rate.
///
/// Samples are finite; WAV output additionally requires them to lie in
/// `[-1, 1]`. Mixtures may exceed that range and are never written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::InvalidWaveform("no samples".into()));
        }
        if sample_rate == 0 {
            return Err(AudioError::InvalidWaveform("zero sample rate".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidWaveform(format!(
                "sample {i} is not finite"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// First `len` samples (or all of them, when shorter).
    pub fn truncated(&self, len: usize) -> Self {
        Self {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}
