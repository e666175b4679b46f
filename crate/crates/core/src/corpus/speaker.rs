use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::item_seed;

/// One spectral resonance of the vocal-tract stand-in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub gain: f64,
}

/// Parameters of a synthetic voice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    pub f0_base: f64,
    /// Relative pitch excursion of the contour.
    pub f0_jitter: f64,
    pub resonances: [Resonance; 3],
    /// Amplitude of aspiration noise relative to the pulse train.
    pub breathiness: f64,
    pub seed: u64,
}

pub const F0_RANGE: (f64, f64) = (80.0, 300.0);

const CENTERS: [(f64, f64); 3] = [(280.0, 900.0), (950.0, 2300.0), (2350.0, 3500.0)];
const BANDWIDTHS: [(f64, f64); 3] = [(60.0, 140.0), (80.0, 200.0), (100.0, 260.0)];
const GAINS: [(f64, f64); 3] = [(1.0, 1.0), (0.35, 0.9), (0.15, 0.5)];

/// Deterministic voice for `speaker_id` under `master_seed`.
pub fn make_speaker(speaker_id: u32, master_seed: u64) -> SpeakerProfile {
    let seed = item_seed(master_seed, "speaker", u64::from(speaker_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Log-uniform pitch so low and high voices are equally common.
    let (lo, hi) = F0_RANGE;
    let f0_base = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln()))
        .exp()
        .clamp(lo, hi);
    let f0_jitter = rng.random_range(0.03..0.10);
    let resonances = std::array::from_fn(|k| Resonance {
        center_hz: rng.random_range(CENTERS[k].0..CENTERS[k].1),
        bandwidth_hz: rng.random_range(BANDWIDTHS[k].0..BANDWIDTHS[k].1),
        gain: if GAINS[k].0 == GAINS[k].1 {
            GAINS[k].0
        } else {
            rng.random_range(GAINS[k].0..GAINS[k].1)
        },
    });
    let breathiness = rng.random_range(0.02..0.12);
    SpeakerProfile {
        speaker_id,
        f0_base,
        f0_jitter,
        resonances,
        breathiness,
        seed,
    }
}

impl SpeakerProfile {
    /// Checks the profile against a sample rate.
    pub fn validate(&self, sample_rate: u32) -> Result<(), String> {
        let nyquist = f64::from(sample_rate) / 2.0;
        if !(F0_RANGE.0..=F0_RANGE.1).contains(&self.f0_base) {
            return Err(format!("f0 {} Hz outside [80, 300]", self.f0_base));
        }
        for r in &self.resonances {
            if !(r.center_hz > 0.0 && r.center_hz < nyquist) {
                return Err(format!(
                    "resonance at {} Hz is not below Nyquist {nyquist}",
                    r.center_hz
                ));
            }
            if !(r.bandwidth_hz > 0.0 && r.gain >= 0.0) {
                return Err("resonance bandwidth and gain must be positive".into());
            }
        }
        if !(0.0..=1.0).contains(&self.breathiness) || !(0.0..1.0).contains(&self.f0_jitter) {
            return Err("breathiness or jitter out of range".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        assert_eq!(make_speaker(3, 9), make_speaker(3, 9));
        let a = make_speaker(0, 9);
        let b = make_speaker(1, 9);
        assert_ne!(a.f0_base, b.f0_base);
        assert_ne!(a.resonances, b.resonances);
        assert_ne!(make_speaker(0, 10), a);
    }

    #[test]
    fn profiles_respect_their_invariants() {
        for id in 0..200 {
            let p = make_speaker(id, 1234);
            p.validate(8000).unwrap();
        }
    }
}
