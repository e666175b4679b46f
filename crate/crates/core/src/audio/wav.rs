use std::path::Path;

use super::{AudioError, Waveform};

const FULL_SCALE: f64 = 32768.0;

fn map_hound(path: &Path, err: hound::Error) -> AudioError {
    match err {
        hound::Error::FormatError(msg) => AudioError::MalformedHeader(msg.to_string()),
        // hound reports a truncated header as a short read.
        hound::Error::IoError(e)
            if matches!(
                e.kind(),
                std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::Other
            ) =>
        {
            AudioError::MalformedHeader("file ends before the header is complete".into())
        }
        hound::Error::IoError(source) => AudioError::Io {
            path: path.display().to_string(),
            source,
        },
        hound::Error::Unsupported => {
            AudioError::UnsupportedEncoding("unsupported WAV variant".into())
        }
        other => AudioError::MalformedHeader(other.to_string()),
    }
}

/// Quantizes a sample in `[-1, 1]` to signed 16-bit PCM.
pub(crate) fn quantize(x: f64) -> i16 {
    (x * FULL_SCALE)
        .round()
        .clamp(-FULL_SCALE, FULL_SCALE - 1.0) as i16
}

pub(crate) fn dequantize(q: i16) -> f64 {
    f64::from(q) / FULL_SCALE
}

/// Reads a RIFF/PCM 16-bit mono file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AudioError::MultiChannel(spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{:?} with {} bits per sample",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(dequantize))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| map_hound(path, e))?;
    if samples.is_empty() {
        return Err(AudioError::MalformedHeader("no sample data".into()));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a RIFF/PCM 16-bit little-endian mono file.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<(), AudioError> {
    let path = path.as_ref();
    if let Some((index, &value)) = wave
        .samples()
        .iter()
        .enumerate()
        .find(|(_, s)| !(-1.0..=1.0).contains(*s))
    {
        return Err(AudioError::OutOfRange { index, value });
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in wave.samples() {
        writer
            .write_sample(quantize(s))
            .map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}
