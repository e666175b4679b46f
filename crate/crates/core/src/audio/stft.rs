use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{AudioError, Waveform};
use crate::diffgraph::{GraphError, LinearMap, Tensor};

/// Overlap-add coverage below this is clamped before normalization, so the
/// first half-window (covered only by the tapering edge of frame 0) is never
/// amplified by more than `1 / NORM_FLOOR`.
const NORM_FLOOR: f64 = 0.1;

/// Analysis window and hop, with cached FFT plans.
#[derive(Clone)]
pub struct StftConfig {
    window_length: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for StftConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftConfig")
            .field("window_length", &self.window_length)
            .field("hop", &self.hop)
            .finish()
    }
}

impl PartialEq for StftConfig {
    fn eq(&self, other: &Self) -> bool {
        self.window_length == other.window_length
            && self.hop == other.hop
            && self.window == other.window
    }
}

/// Periodic Hann window of length `n`.
pub fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

impl StftConfig {
    /// Periodic-Hann configuration.
    pub fn hann(window_length: usize, hop: usize) -> Result<Self, AudioError> {
        Self::with_window(periodic_hann(window_length), hop)
    }

    pub fn with_window(window: Vec<f64>, hop: usize) -> Result<Self, AudioError> {
        let n = window.len();
        if n < 2 || n % 2 != 0 {
            return Err(AudioError::InvalidConfig(format!(
                "window length {n} must be even and >= 2"
            )));
        }
        if hop == 0 || n % hop != 0 {
            return Err(AudioError::InvalidConfig(format!(
                "hop {hop} must divide window length {n}"
            )));
        }
        // Constant overlap-add: the hop-shifted windows must sum to a constant.
        let sums: Vec<f64> = (0..hop)
            .map(|r| (r..n).step_by(hop).map(|i| window[i]).sum())
            .collect();
        let target = sums[0];
        if target <= 0.0
            || sums
                .iter()
                .any(|s| (s - target).abs() > 1e-9 * target.abs().max(1.0))
        {
            return Err(AudioError::InvalidConfig(format!(
                "window/hop pair ({n}, {hop}) does not satisfy constant overlap-add"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            window_length: n,
            hop,
            window,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    pub fn window_length(&self) -> usize {
        self.window_length
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    /// `1 + floor((len − window) / hop)`, or 0 when the signal is too short.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window_length {
            0
        } else {
            1 + (len - self.window_length) / self.hop
        }
    }

    /// Smallest padded length `>= len + hop` that frames without remainder, so
    /// that every original sample lies under two frames or in the first hop.
    pub fn padded_length(&self, len: usize) -> usize {
        let want = (len + self.hop).max(self.window_length);
        let frames = (want - self.window_length).div_ceil(self.hop);
        self.window_length + frames * self.hop
    }

    /// Per-sample normalization applied after overlap-add.
    fn ola_scale(&self, frames: usize, len: usize) -> Vec<f64> {
        let mut cover = vec![0.0; len];
        for t in 0..frames {
            for (c, w) in cover[t * self.hop..][..self.window_length]
                .iter_mut()
                .zip(&self.window)
            {
                *c += w;
            }
        }
        cover
            .into_iter()
            .map(|c| {
                if c > 0.0 {
                    1.0 / c.max(NORM_FLOOR)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Windowed forward transform of every frame; `re`/`im` are `frames × bins`.
    fn analyze(&self, signal: &[f64], frames: usize, re: &mut [f64], im: &mut [f64]) {
        let (n, bins) = (self.window_length, self.bins());
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            let seg = &signal[t * self.hop..t * self.hop + n];
            for ((b, x), w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex64::new(x * w, 0.0);
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                re[t * bins + k] = buf[k].re;
                im[t * bins + k] = buf[k].im;
            }
        }
    }

    /// Inverse real DFT of every frame, overlap-added and normalized.
    fn synthesize(&self, re: &[f64], im: &[f64], frames: usize, len: usize) -> Vec<f64> {
        let (n, bins) = (self.window_length, self.bins());
        let mut out = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            let (fr, fi) = (&re[t * bins..(t + 1) * bins], &im[t * bins..(t + 1) * bins]);
            buf[0] = Complex64::new(fr[0], 0.0);
            buf[n / 2] = Complex64::new(fr[n / 2], 0.0);
            for k in 1..n / 2 {
                buf[k] = Complex64::new(fr[k], fi[k]);
                buf[n - k] = Complex64::new(fr[k], -fi[k]);
            }
            self.inverse.process(&mut buf);
            for (o, b) in out[t * self.hop..][..n].iter_mut().zip(&buf) {
                *o += b.re / n as f64;
            }
        }
        for (o, s) in out.iter_mut().zip(self.ola_scale(frames, len)) {
            *o *= s;
        }
        out
    }

    /// Adjoint of [`StftConfig::synthesize`].
    fn synthesize_adjoint(&self, grad: &[f64], frames: usize, re: &mut [f64], im: &mut [f64]) {
        let (n, bins) = (self.window_length, self.bins());
        let scaled: Vec<f64> = grad
            .iter()
            .zip(self.ola_scale(frames, grad.len()))
            .map(|(g, s)| g * s)
            .collect();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            for (b, g) in buf.iter_mut().zip(&scaled[t * self.hop..][..n]) {
                *b = Complex64::new(*g, 0.0);
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                let c = if k == 0 || k == n / 2 { 1.0 } else { 2.0 } / n as f64;
                re[t * bins + k] = c * buf[k].re;
                // Imaginary parts of DC and Nyquist are discarded by synthesis.
                im[t * bins + k] = if k == 0 || k == n / 2 {
                    0.0
                } else {
                    c * buf[k].im
                };
            }
        }
    }

    /// Adjoint of [`StftConfig::analyze`].
    fn analyze_adjoint(&self, re: &[f64], im: &[f64], frames: usize, len: usize) -> Vec<f64> {
        let (n, bins) = (self.window_length, self.bins());
        let mut out = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for k in 0..bins {
                buf[k] = Complex64::new(re[t * bins + k], im[t * bins + k]);
            }
            self.inverse.process(&mut buf);
            for ((o, b), w) in out[t * self.hop..][..n]
                .iter_mut()
                .zip(&buf)
                .zip(&self.window)
            {
                *o += w * b.re;
            }
        }
        out
    }
}

/// Complex STFT frames of a real signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    re: Vec<f64>,
    im: Vec<f64>,
    config: StftConfig,
    num_samples: usize,
    sample_rate: u32,
}

impl Spectrogram {
    pub fn new(
        re: Vec<f64>,
        im: Vec<f64>,
        frames: usize,
        config: StftConfig,
        num_samples: usize,
        sample_rate: u32,
    ) -> Result<Self, AudioError> {
        let bins = config.bins();
        if re.len() != frames * bins || im.len() != frames * bins {
            return Err(AudioError::Inconsistent(format!(
                "{} real / {} imaginary values for {frames} frames × {bins} bins",
                re.len(),
                im.len()
            )));
        }
        if config.frame_count(num_samples) != frames {
            return Err(AudioError::Inconsistent(format!(
                "{frames} frames cannot come from {num_samples} samples"
            )));
        }
        if re.iter().chain(&im).any(|v| !v.is_finite()) {
            return Err(AudioError::Inconsistent("non-finite bin".into()));
        }
        Ok(Self {
            frames,
            bins,
            re,
            im,
            config,
            num_samples,
            sample_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Real parts, `frames × bins` row-major.
    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// `|X|²` per bin, `frames × bins`.
    pub fn power(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .collect()
    }

    /// Applies a real gain per bin to the complex values.
    pub fn masked(&self, mask: &[f64]) -> Result<Self, AudioError> {
        if mask.len() != self.re.len() {
            return Err(AudioError::Inconsistent(format!(
                "mask of {} values for {} bins",
                mask.len(),
                self.re.len()
            )));
        }
        let mut out = self.clone();
        for ((r, i), m) in out.re.iter_mut().zip(out.im.iter_mut()).zip(mask) {
            *r *= m;
            *i *= m;
        }
        Ok(out)
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram, AudioError> {
    let frames = cfg.frame_count(w.len());
    if frames == 0 {
        return Err(AudioError::TooShort {
            len: w.len(),
            window: cfg.window_length,
        });
    }
    let bins = cfg.bins();
    let mut re = vec![0.0; frames * bins];
    let mut im = vec![0.0; frames * bins];
    cfg.analyze(w.samples(), frames, &mut re, &mut im);
    Spectrogram::new(re, im, frames, cfg.clone(), w.len(), w.sample_rate())
}

/// Overlap-add synthesis back to the original sample count. Samples past the
/// last frame are zero.
pub fn istft(s: &Spectrogram) -> Result<Waveform, AudioError> {
    if s.re.len() != s.frames * s.bins || s.bins != s.config.bins() {
        return Err(AudioError::Inconsistent("frame/bin counts disagree".into()));
    }
    let out = s.config.synthesize(&s.re, &s.im, s.frames, s.num_samples);
    Waveform::new(out, s.sample_rate)
}

/// STFT as a tape op: `1 × len` signal to `frames × 2·bins` (real block, then
/// imaginary block).
#[derive(Debug)]
pub struct StftMap {
    config: StftConfig,
    len: usize,
}

impl StftMap {
    pub fn new(config: StftConfig, len: usize) -> Result<Self, AudioError> {
        if config.frame_count(len) == 0 {
            return Err(AudioError::TooShort {
                len,
                window: config.window_length,
            });
        }
        Ok(Self { config, len })
    }

    pub fn frames(&self) -> usize {
        self.config.frame_count(self.len)
    }
}

impl LinearMap for StftMap {
    fn name(&self) -> &'static str {
        "stft"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, GraphError> {
        if input != [1, self.len] {
            return Err(GraphError::ShapeMismatch {
                op: "stft",
                shapes: vec![input.to_vec(), vec![1, self.len]],
            });
        }
        Ok(vec![self.frames(), 2 * self.config.bins()])
    }

    fn apply(&self, input: &Tensor) -> Tensor {
        let (frames, bins) = (self.frames(), self.config.bins());
        let mut re = vec![0.0; frames * bins];
        let mut im = vec![0.0; frames * bins];
        self.config.analyze(input.data(), frames, &mut re, &mut im);
        Tensor::matrix(frames, 2 * bins, interleave_blocks(&re, &im, bins)).expect("shape")
    }

    fn adjoint(&self, grad: &Tensor) -> Tensor {
        let (re, im) = split_blocks(grad.data(), self.config.bins());
        let out = self
            .config
            .analyze_adjoint(&re, &im, self.frames(), self.len);
        Tensor::row(out)
    }
}

/// Inverse STFT as a tape op: `frames × 2·bins` to a `1 × len` signal.
#[derive(Debug)]
pub struct IstftMap {
    config: StftConfig,
    frames: usize,
    len: usize,
}

impl IstftMap {
    pub fn new(config: StftConfig, frames: usize, len: usize) -> Result<Self, AudioError> {
        if frames == 0 || config.frame_count(len) != frames {
            return Err(AudioError::Inconsistent(format!(
                "{frames} frames cannot come from {len} samples"
            )));
        }
        Ok(Self {
            config,
            frames,
            len,
        })
    }
}

impl LinearMap for IstftMap {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, GraphError> {
        let expected = [self.frames, 2 * self.config.bins()];
        if input != expected {
            return Err(GraphError::ShapeMismatch {
                op: "istft",
                shapes: vec![input.to_vec(), expected.to_vec()],
            });
        }
        Ok(vec![1, self.len])
    }

    fn apply(&self, input: &Tensor) -> Tensor {
        let (re, im) = split_blocks(input.data(), self.config.bins());
        Tensor::row(self.config.synthesize(&re, &im, self.frames, self.len))
    }

    fn adjoint(&self, grad: &Tensor) -> Tensor {
        let bins = self.config.bins();
        let mut re = vec![0.0; self.frames * bins];
        let mut im = vec![0.0; self.frames * bins];
        self.config
            .synthesize_adjoint(grad.data(), self.frames, &mut re, &mut im);
        Tensor::matrix(self.frames, 2 * bins, interleave_blocks(&re, &im, bins)).expect("shape")
    }
}

/// Row-wise `[re | im]` layout from separate `frames × bins` buffers.
fn interleave_blocks(re: &[f64], im: &[f64], bins: usize) -> Vec<f64> {
    re.chunks_exact(bins)
        .zip(im.chunks_exact(bins))
        .flat_map(|(r, i)| r.iter().chain(i).copied())
        .collect()
}

pub(crate) fn split_blocks(data: &[f64], bins: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = Vec::with_capacity(data.len() / 2);
    let mut im = Vec::with_capacity(data.len() / 2);
    for row in data.chunks_exact(2 * bins) {
        re.extend_from_slice(&row[..bins]);
        im.extend_from_slice(&row[bins..]);
    }
    (re, im)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..len).map(|_| rng.random_range(-0.9..0.9)).collect(),
            8000,
        )
        .unwrap()
    }

    fn cfg() -> StftConfig {
        StftConfig::hann(256, 128).unwrap()
    }

    #[test]
    fn rejects_non_cola_configs() {
        assert!(StftConfig::hann(256, 96).is_err());
        assert!(StftConfig::with_window(vec![1.0; 8], 3).is_err());
        // sqrt-Hann at 50% hop is not COLA in amplitude.
        let sqrt_hann: Vec<f64> = periodic_hann(16).iter().map(|w| w.sqrt()).collect();
        assert!(StftConfig::with_window(sqrt_hann, 8).is_err());
        assert!(StftConfig::hann(256, 64).is_ok());
    }

    #[test]
    fn frame_count_and_bins() {
        let c = cfg();
        assert_eq!(c.bins(), 129);
        assert_eq!(c.frame_count(255), 0);
        assert_eq!(c.frame_count(256), 1);
        assert_eq!(c.frame_count(1000), 1 + (1000 - 256) / 128);
        let s = stft(&noise(1000, 1), &c).unwrap();
        assert_eq!((s.frames(), s.bins()), (6, 129));
        assert!(matches!(
            stft(&noise(100, 1), &c),
            Err(AudioError::TooShort { .. })
        ));
    }

    #[test]
    fn zero_in_zero_out() {
        let z = Waveform::new(vec![0.0; 700], 8000).unwrap();
        let s = stft(&z, &cfg()).unwrap();
        assert!(s.re().iter().chain(s.im()).all(|&v| v == 0.0));
        assert!(istft(&s).unwrap().samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centred_sine_concentrates_energy() {
        let c = cfg();
        let k = 10;
        let x: Vec<f64> = (0..2048)
            .map(|n| 0.8 * (2.0 * PI * k as f64 * n as f64 / 256.0).sin())
            .collect();
        let s = stft(&Waveform::new(x, 8000).unwrap(), &c).unwrap();
        let p = s.power();
        for frame in p.chunks(c.bins()) {
            let total: f64 = frame.iter().sum();
            // A Hann-windowed bin-centred sine puts 2/3 of its energy in bin k
            // and the rest in the two neighbours of the main lobe.
            assert!(
                (frame[k] / total - 2.0 / 3.0).abs() < 1e-9,
                "{}",
                frame[k] / total
            );
            let near: f64 = frame[k - 1..=k + 1].iter().sum();
            assert!(near / total > 0.99);
        }
    }

    /// Direct O(N²) DFT of one windowed frame.
    fn dft_frame(x: &[f64], w: &[f64], k: usize) -> (f64, f64) {
        let n = x.len();
        x.iter()
            .zip(w)
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (i, (x, w))| {
                let a = -2.0 * PI * (k * i) as f64 / n as f64;
                (re + x * w * a.cos(), im + x * w * a.sin())
            })
    }

    #[test]
    fn matches_direct_dft() {
        let c = cfg();
        let w = noise(600, 4);
        let s = stft(&w, &c).unwrap();
        for t in 0..s.frames() {
            let seg = &w.samples()[t * 128..t * 128 + 256];
            for k in [0, 1, 17, 64, 128] {
                let (re, im) = dft_frame(seg, c.window(), k);
                assert!((s.re()[t * 129 + k] - re).abs() < 1e-10);
                assert!((s.im()[t * 129 + k] - im).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn parseval_per_frame() {
        let c = cfg();
        let w = noise(1280, 2);
        let s = stft(&w, &c).unwrap();
        for t in 0..s.frames() {
            let seg = &w.samples()[t * 128..t * 128 + 256];
            let time: f64 = seg
                .iter()
                .zip(c.window())
                .map(|(x, w)| (x * w).powi(2))
                .sum();
            let p = &s.power()[t * 129..(t + 1) * 129];
            let freq = (p[0] + p[128] + 2.0 * p[1..128].iter().sum::<f64>()) / 256.0;
            assert!((time - freq).abs() <= 1e-9 * time);
        }
    }

    #[test]
    fn istft_is_linear() {
        let c = cfg();
        let a = stft(&noise(900, 5), &c).unwrap();
        let b = stft(&noise(900, 6), &c).unwrap();
        let sum = Spectrogram::new(
            a.re().iter().zip(b.re()).map(|(x, y)| x + y).collect(),
            a.im().iter().zip(b.im()).map(|(x, y)| x + y).collect(),
            a.frames(),
            c.clone(),
            900,
            8000,
        )
        .unwrap();
        let (ya, yb, ys) = (istft(&a).unwrap(), istft(&b).unwrap(), istft(&sum).unwrap());
        for i in 0..900 {
            assert!((ys.samples()[i] - ya.samples()[i] - yb.samples()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn inconsistent_metadata_is_rejected() {
        let c = cfg();
        assert!(
            Spectrogram::new(vec![0.0; 129], vec![0.0; 129], 1, c.clone(), 1000, 8000).is_err()
        );
        assert!(Spectrogram::new(vec![0.0; 128], vec![0.0; 129], 1, c.clone(), 256, 8000).is_err());
        assert!(IstftMap::new(c, 3, 256).is_err());
    }

    #[test]
    fn padded_length_covers_the_tail() {
        let c = cfg();
        for len in [256usize, 300, 511, 1000, 16000] {
            let p = c.padded_length(len);
            assert!(p >= len + 128);
            assert_eq!((p - 256) % 128, 0);
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn round_trip_on_interior_samples(len in 256usize..3000, seed in 0u64..1000, quarter in any::<bool>()) {
            let c = if quarter { StftConfig::hann(256, 64).unwrap() } else { cfg() };
            let w = noise(len, seed);
            let y = istft(&stft(&w, &c).unwrap()).unwrap();
            prop_assert_eq!(y.len(), len);
            let frames = c.frame_count(len);
            // Samples covered by the full window overlap.
            let lo = c.window_length() - c.hop();
            let hi = (frames - 1) * c.hop() + c.hop();
            for i in lo..hi.max(lo) {
                prop_assert!((y.samples()[i] - w.samples()[i]).abs() <= 1e-10);
            }
        }

        #[test]
        fn tape_maps_satisfy_the_adjoint_identity(len in 256usize..1200, seed in 0u64..1000) {
            let c = cfg();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fwd = StftMap::new(c.clone(), len).unwrap();
            let frames = fwd.frames();
            let x = Tensor::row((0..len).map(|_| rng.random_range(-1.0..1.0)).collect());
            let y = Tensor::matrix(frames, 258, (0..frames * 258).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let lhs = dot(fwd.apply(&x).data(), y.data());
            let rhs = dot(x.data(), fwd.adjoint(&y).data());
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));

            let inv = IstftMap::new(c, frames, len).unwrap();
            let lhs = dot(inv.apply(&y).data(), x.data());
            let rhs = dot(y.data(), inv.adjoint(&x).data());
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn tape_maps_agree_with_free_functions() {
        let c = cfg();
        let w = noise(777, 9);
        let s = stft(&w, &c).unwrap();
        let fwd = StftMap::new(c.clone(), 777).unwrap();
        let out = fwd.apply(&Tensor::row_from(w.samples()));
        let (re, im) = split_blocks(out.data(), 129);
        assert_eq!(re, s.re());
        assert_eq!(im, s.im());
        let inv = IstftMap::new(c, s.frames(), 777).unwrap();
        assert_eq!(inv.apply(&out).data(), istft(&s).unwrap().samples());
    }
}
