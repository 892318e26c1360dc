//! 16 kHz mono WAV files: 16-bit PCM or 32-bit float in, 16-bit PCM out.

use std::path::Path;

use crate::error::{Error, Result};

use super::{AudioBuffer, DEFAULT_SAMPLE_RATE};

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!("{}: {} channels, expected mono", path.display(), spec.channels)));
    }
    if spec.sample_rate != DEFAULT_SAMPLE_RATE {
        return Err(Error::Audio(format!(
            "{}: sample rate {} Hz, expected {DEFAULT_SAMPLE_RATE} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::Audio(format!("{}: unsupported sample format {fmt:?}/{bits}-bit", path.display())))
        }
    };
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM; samples are clipped to `[-1, 1)`.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &audio.samples {
        w.write_sample(to_pcm16(s)).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

fn to_pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Audio(format!("{}: {other}", path.display())),
    }
}
