//! Waveform ↔ spectrogram conversions, power-law compression and SNR mixing.

mod diff;
mod stft;
pub mod wav;

pub use stft::{SpecPlanes, StftConfig, StftPlan};

use crate::error::{Error, Result};
use crate::tensor::ops::atan2_wrapped;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Audio("empty waveform".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Audio(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn rms(&self) -> f64 {
        (self.energy() / self.len() as f64).sqrt()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

/// One-sided complex STFT, `frames × bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub planes: SpecPlanes<f64>,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize, config: StftConfig, sample_rate: u32) -> Self {
        let bins = config.bins();
        let planes = SpecPlanes { re: vec![0.0; frames * bins], im: vec![0.0; frames * bins], frames, bins };
        Self { planes, config, sample_rate }
    }

    /// Builds `mag · e^{i·phase}`.
    pub fn from_polar(mag: &[f64], phase: &[f64], frames: usize, config: StftConfig, sample_rate: u32) -> Result<Self> {
        let bins = config.bins();
        if mag.len() != frames * bins || phase.len() != mag.len() {
            return Err(Error::Shape { op: "from_polar", detail: format!("expected {} values", frames * bins) });
        }
        let re = mag.iter().zip(phase).map(|(m, p)| m * p.cos()).collect();
        let im = mag.iter().zip(phase).map(|(m, p)| m * p.sin()).collect();
        Ok(Self { planes: SpecPlanes { re, im, frames, bins }, config, sample_rate })
    }

    pub fn frames(&self) -> usize {
        self.planes.frames
    }

    pub fn bins(&self) -> usize {
        self.planes.bins
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.planes.re.iter().zip(&self.planes.im).map(|(r, i)| r.hypot(*i)).collect()
    }

    /// Wrapped phase in `(-π, π]`.
    pub fn phase(&self) -> Vec<f64> {
        self.planes.re.iter().zip(&self.planes.im).map(|(r, i)| atan2_wrapped(*i, *r)).collect()
    }
}

pub fn stft(audio: &AudioBuffer, cfg: StftConfig) -> Result<ComplexSpectrogram> {
    let plan = StftPlan::<f64>::new(cfg)?;
    Ok(ComplexSpectrogram { planes: plan.forward(&audio.samples)?, config: cfg, sample_rate: audio.sample_rate })
}

pub fn istft(spec: &ComplexSpectrogram, out_len: usize) -> Result<AudioBuffer> {
    let plan = StftPlan::<f64>::new(spec.config)?;
    AudioBuffer::new(plan.inverse(&spec.planes, out_len)?, spec.sample_rate)
}

/// Elementwise `mag^c`.
pub fn compress(mag: &[f64], c: f64) -> Result<Vec<f64>> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Invalid(format!("compression exponent {c} outside (0, 1]")));
    }
    if let Some(v) = mag.iter().find(|v| **v < 0.0 || v.is_nan()) {
        return Err(Error::Invalid(format!("cannot compress negative magnitude {v}")));
    }
    Ok(mag.iter().map(|m| m.powf(c)).collect())
}

/// Elementwise `x^(1/c)`.
pub fn inverse_compress(x: &[f64], c: f64) -> Result<Vec<f64>> {
    compress(x, 1.0)?;
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Invalid(format!("compression exponent {c} outside (0, 1]")));
    }
    Ok(x.iter().map(|v| v.powf(1.0 / c)).collect())
}

/// Gain applied to `noise` so that `clean + g·noise` has the requested global SNR.
pub fn snr_gain(clean: &AudioBuffer, noise: &AudioBuffer, snr_db: f64) -> Result<f64> {
    if clean.len() != noise.len() {
        return Err(Error::Audio(format!("length mismatch {} vs {}", clean.len(), noise.len())));
    }
    let (ec, en) = (clean.energy(), noise.energy());
    if ec == 0.0 || en == 0.0 {
        return Err(Error::Audio("zero-energy input to SNR mixing".into()));
    }
    Ok((ec / (en * 10f64.powf(snr_db / 10.0))).sqrt())
}

pub fn mix_at_snr(clean: &AudioBuffer, noise: &AudioBuffer, snr_db: f64) -> Result<AudioBuffer> {
    let g = snr_gain(clean, noise, snr_db)?;
    let samples = clean.samples.iter().zip(&noise.samples).map(|(c, n)| c + g * n).collect();
    AudioBuffer::new(samples, clean.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compress_fixed_points_and_errors() {
        assert_eq!(compress(&[1.0, 0.0], 0.3).unwrap(), vec![1.0, 0.0]);
        assert!(compress(&[-0.1], 0.3).is_err());
        assert!(compress(&[1.0], 0.0).is_err());
    }

    #[test]
    fn mixing_rejects_silence_and_length_mismatch() {
        let a = AudioBuffer::new(vec![1.0, -1.0], 16_000).unwrap();
        let z = AudioBuffer::new(vec![0.0, 0.0], 16_000).unwrap();
        let short = AudioBuffer::new(vec![1.0], 16_000).unwrap();
        assert!(mix_at_snr(&a, &z, 0.0).is_err());
        assert!(mix_at_snr(&z, &a, 0.0).is_err());
        assert!(mix_at_snr(&a, &short, 0.0).is_err());
    }

    #[test]
    fn audio_buffer_rejects_bad_input() {
        assert!(AudioBuffer::new(vec![], 16_000).is_err());
        assert!(AudioBuffer::new(vec![f64::NAN], 16_000).is_err());
    }
}
