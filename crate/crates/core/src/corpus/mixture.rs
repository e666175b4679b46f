use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Grid every mixture component is rounded to, so that the sum of two
/// components is exact in 64-bit arithmetic.
const GRID: f64 = 1099511627776.0; // 2^40

fn snap(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

/// Output of [`make_mixture`]: components truncated to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParts {
    pub mixture: Waveform,
    pub target: Waveform,
    /// Interferer after scaling.
    pub interferer: Waveform,
    pub interferer_scale: f64,
}

/// Fully overlapped two-speaker mixture at `snr_db` (target over interferer).
pub fn make_mixture(u1: &Waveform, u2: &Waveform, snr_db: f64) -> Result<MixtureParts> {
    if u1.sample_rate() != u2.sample_rate() {
        return Err(Error::Invalid(format!(
            "sample rates differ: {} vs {}",
            u1.sample_rate(),
            u2.sample_rate()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::Invalid("snr must be finite".into()));
    }
    let len = u1.len().min(u2.len());
    let t = &u1.samples()[..len];
    let i = &u2.samples()[..len];
    let et: f64 = t.iter().map(|x| x * x).sum();
    let ei: f64 = i.iter().map(|x| x * x).sum();
    if et == 0.0 || ei == 0.0 {
        return Err(Error::Invalid("mixture input has zero energy".into()));
    }
    let scale = (et / (ei * 10f64.powf(snr_db / 10.0))).sqrt();
    let target: Vec<f64> = t.iter().map(|&x| snap(x)).collect();
    let interferer: Vec<f64> = i.iter().map(|&x| snap(scale * x)).collect();
    let mixture: Vec<f64> = target.iter().zip(&interferer).map(|(a, b)| a + b).collect();
    let rate = u1.sample_rate();
    Ok(MixtureParts {
        mixture: Waveform::new(mixture, rate)?,
        target: Waveform::new(target, rate)?,
        interferer: Waveform::new(interferer, rate)?,
        interferer_scale: scale,
    })
}

/// One extraction item: a mixture, which speaker to pull out, and the cue.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    /// `<mixture id>/<target speaker>`, unique within a split.
    pub sample_id: String,
    pub mixture_id: String,
    pub mixture: Waveform,
    pub target: Waveform,
    pub interferer: Waveform,
    pub enrollment: Waveform,
    pub enrollment_id: String,
    /// Utterance of the target speaker inside the mixture.
    pub target_utterance: String,
    pub target_speaker: u32,
    pub snr_db: f64,
}
