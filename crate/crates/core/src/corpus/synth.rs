use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SpeakerProfile;
use crate::audio::Waveform;
use crate::digest::item_seed;
use crate::error::{Error, Result};

pub const MIN_DURATION_S: f64 = 0.5;
pub const PEAK: f64 = 0.9;

struct Syllable {
    start: usize,
    end: usize,
    level: f64,
    /// Per-resonance center shifts, a crude vowel change.
    shift: [f64; 3],
    pitch: f64,
}

/// Two-pole resonator with unity-order gain normalisation.
struct Resonator {
    a1: f64,
    a2: f64,
    b0: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(center: f64, bandwidth: f64, rate: f64) -> Self {
        let r = (-PI * bandwidth / rate).exp();
        let theta = 2.0 * PI * center / rate;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            b0: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn retune(&mut self, center: f64, bandwidth: f64, rate: f64) {
        let fresh = Self::new(center, bandwidth, rate);
        self.a1 = fresh.a1;
        self.a2 = fresh.a2;
        self.b0 = fresh.b0;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn syllables(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<Syllable> {
    let secs = |s: f64| (s * rate).round() as usize;
    let mut out = Vec::new();
    let mut t = secs(rng.random_range(0.01..0.06));
    while t + secs(0.08) < n {
        let len = secs(rng.random_range(0.10..0.28));
        let end = (t + len).min(n);
        out.push(Syllable {
            start: t,
            end,
            level: rng.random_range(0.6..1.0),
            shift: std::array::from_fn(|_| rng.random_range(-0.08..0.08)),
            pitch: rng.random_range(-1.0..1.0),
        });
        t = end + secs(rng.random_range(0.02..0.08));
    }
    out
}

/// Voiced-speech stand-in for one utterance of `p`, peak-normalised to 0.9.
pub fn synth_utterance(
    p: &SpeakerProfile,
    utt_seed: u64,
    duration_s: f64,
    sample_rate: u32,
) -> Result<Waveform> {
    if !(duration_s >= MIN_DURATION_S) {
        return Err(Error::Invalid(format!(
            "utterance duration {duration_s} s is below {MIN_DURATION_S} s"
        )));
    }
    p.validate(sample_rate).map_err(Error::Invalid)?;
    let rate = f64::from(sample_rate);
    let n = (duration_s * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(p.seed, "utterance", utt_seed));

    let slow = rng.random_range(0.7..2.5);
    let fast = rng.random_range(3.0..6.0);
    let (ph1, ph2) = (
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    );
    let segs = syllables(&mut rng, n, rate);

    let attack = (0.02 * rate) as usize;
    let release = (0.03 * rate) as usize;
    let mut envelope = vec![0.0; n];
    let mut owner = vec![usize::MAX; n];
    for (k, s) in segs.iter().enumerate() {
        let len = s.end - s.start;
        for i in s.start..s.end {
            let from_start = i - s.start;
            let to_end = s.end - 1 - i;
            let ramp = |d: usize, w: usize| {
                if d >= w {
                    1.0
                } else {
                    0.5 - 0.5 * (PI * d as f64 / w as f64).cos()
                }
            };
            let w = ramp(from_start, attack.min(len / 2)) * ramp(to_end, release.min(len / 2));
            envelope[i] = s.level * w;
            owner[i] = k;
        }
    }

    let mut resonators: Vec<Resonator> = p
        .resonances
        .iter()
        .map(|r| Resonator::new(r.center_hz, r.bandwidth_hz, rate))
        .collect();
    let mut current = usize::MAX;
    let mut phase = 0.0;
    let mut glottal = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / rate;
        let k = owner[i];
        if k != usize::MAX && k != current {
            current = k;
            for (res, (prof, shift)) in resonators
                .iter_mut()
                .zip(p.resonances.iter().zip(segs[k].shift))
            {
                res.retune(prof.center_hz * (1.0 + shift), prof.bandwidth_hz, rate);
            }
        }
        let accent = if k == usize::MAX { 0.0 } else { segs[k].pitch };
        let contour = 0.5 * (2.0 * PI * slow * t + ph1).sin()
            + 0.3 * (2.0 * PI * fast * t + ph2).sin()
            + 0.4 * accent;
        let f0 = p.f0_base * (1.0 + p.f0_jitter * contour) * (1.0 - 0.08 * t / duration_s);
        phase += f0 / rate;
        let pulse = if phase >= 1.0 {
            phase -= 1.0;
            1.0
        } else {
            0.0
        };
        // One-pole tilt turns the impulse train into a softer glottal flow.
        glottal = 0.5 * glottal + pulse;
        let noise = rng.random_range(-1.0..1.0) * p.breathiness;
        let source = envelope[i] * (glottal + noise);
        let y: f64 = resonators
            .iter_mut()
            .zip(&p.resonances)
            .map(|(res, prof)| prof.gain * res.step(source))
            .sum();
        out.push(y);
    }

    let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if !(peak > 0.0) {
        return Err(Error::Invalid("synthesised utterance is silent".into()));
    }
    let gain = PEAK / peak;
    for s in &mut out {
        *s *= gain;
    }
    Ok(Waveform::new(out, sample_rate)?)
}
