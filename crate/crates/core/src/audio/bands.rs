use std::ops::Range;

use super::{AudioError, Spectrogram};

/// Contiguous, sorted, exhaustive partition of the frequency-bin axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandPlan {
    ranges: Vec<Range<usize>>,
    bins: usize,
}

impl BandPlan {
    pub fn new(ranges: Vec<Range<usize>>, bins: usize) -> Result<Self, AudioError> {
        let mut cursor = 0;
        for r in &ranges {
            if r.start != cursor || r.end <= r.start {
                return Err(AudioError::InvalidBandPlan(format!(
                    "band {r:?} does not continue from bin {cursor}"
                )));
            }
            cursor = r.end;
        }
        if cursor != bins {
            return Err(AudioError::InvalidBandPlan(format!(
                "bands cover [0, {cursor}) but the spectrum has {bins} bins"
            )));
        }
        Ok(Self { ranges, bins })
    }

    /// Plan from band widths, low to high.
    pub fn from_widths(widths: &[usize]) -> Result<Self, AudioError> {
        let mut start = 0;
        let ranges = widths
            .iter()
            .map(|&w| {
                let r = start..start + w;
                start += w;
                r
            })
            .collect();
        Self::new(ranges, start)
    }

    /// Four 16-bin low bands, then the remaining bins split four ways with the
    /// remainder going to the top band. 16,16,16,16,16,16,16,17 for 129 bins.
    pub fn desk_default(bins: usize) -> Result<Self, AudioError> {
        if bins < 68 {
            return Err(AudioError::InvalidBandPlan(format!(
                "{bins} bins is too few for the default plan"
            )));
        }
        let high = bins - 64;
        let base = high / 4;
        let mut widths = vec![16; 4];
        widths.extend([base, base, base, high - 3 * base]);
        Self::from_widths(&widths)
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn widths(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }
}

/// Complex values of one band, `frames × width` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BandSlice {
    pub range: Range<usize>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

pub fn band_split(s: &Spectrogram, plan: &BandPlan) -> Result<Vec<BandSlice>, AudioError> {
    if plan.bins() != s.bins() {
        return Err(AudioError::InvalidBandPlan(format!(
            "plan covers {} bins, spectrogram has {}",
            plan.bins(),
            s.bins()
        )));
    }
    let bins = s.bins();
    Ok(plan
        .ranges()
        .iter()
        .map(|r| {
            let take = |v: &[f64]| -> Vec<f64> {
                v.chunks_exact(bins)
                    .flat_map(|row| row[r.clone()].iter().copied())
                    .collect()
            };
            BandSlice {
                range: r.clone(),
                re: take(s.re()),
                im: take(s.im()),
            }
        })
        .collect())
}

/// Reassembles `frames × bins` real and imaginary buffers from band slices.
pub fn band_merge(
    bands: &[BandSlice],
    plan: &BandPlan,
    frames: usize,
) -> Result<(Vec<f64>, Vec<f64>), AudioError> {
    if bands.len() != plan.len() || bands.iter().zip(plan.ranges()).any(|(b, r)| &b.range != r) {
        return Err(AudioError::InvalidBandPlan(
            "band slices do not follow the plan".into(),
        ));
    }
    let bins = plan.bins();
    let mut re = vec![0.0; frames * bins];
    let mut im = vec![0.0; frames * bins];
    for b in bands {
        let w = b.range.len();
        if b.re.len() != frames * w || b.im.len() != frames * w {
            return Err(AudioError::InvalidBandPlan(format!(
                "band {:?} has the wrong frame count",
                b.range
            )));
        }
        for t in 0..frames {
            re[t * bins + b.range.start..t * bins + b.range.end]
                .copy_from_slice(&b.re[t * w..(t + 1) * w]);
            im[t * bins + b.range.start..t * bins + b.range.end]
                .copy_from_slice(&b.im[t * w..(t + 1) * w]);
        }
    }
    Ok((re, im))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{stft, StftConfig, Waveform};

    fn spectrogram() -> Spectrogram {
        let x: Vec<f64> = (0..1200)
            .map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5)
            .collect();
        stft(
            &Waveform::new(x, 8000).unwrap(),
            &StftConfig::hann(256, 128).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn default_plan_layout() {
        let p = BandPlan::desk_default(129).unwrap();
        assert_eq!(p.widths(), vec![16, 16, 16, 16, 16, 16, 16, 17]);
        assert_eq!(p.ranges()[4], 64..80);
    }

    #[test]
    fn rejects_gaps_overlaps_and_short_cover() {
        assert!(BandPlan::new(vec![0..10, 11..129], 129).is_err());
        assert!(BandPlan::new(vec![0..10, 9..129], 129).is_err());
        assert!(BandPlan::new(vec![0..10, 10..100], 129).is_err());
        assert!(BandPlan::new(vec![0..0, 0..129], 129).is_err());
    }

    #[test]
    fn one_band_is_identity() {
        let s = spectrogram();
        let plan = BandPlan::new(vec![0..129], 129).unwrap();
        let bands = band_split(&s, &plan).unwrap();
        assert_eq!(bands[0].re, s.re());
        assert_eq!(bands[0].im, s.im());
    }

    #[test]
    fn split_then_merge_is_bit_exact() {
        let s = spectrogram();
        for plan in [
            BandPlan::from_widths(&[40, 89]).unwrap(),
            BandPlan::desk_default(129).unwrap(),
        ] {
            let bands = band_split(&s, &plan).unwrap();
            for (b, w) in bands.iter().zip(plan.widths()) {
                assert_eq!(b.re.len(), s.frames() * w);
            }
            let (re, im) = band_merge(&bands, &plan, s.frames()).unwrap();
            assert_eq!(re, s.re());
            assert_eq!(im, s.im());
        }
    }

    #[test]
    fn plan_must_match_the_bin_axis() {
        let s = spectrogram();
        let plan = BandPlan::from_widths(&[64, 64]).unwrap();
        assert!(band_split(&s, &plan).is_err());
    }
}
