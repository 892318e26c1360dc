//! Synthetic speech-like data: harmonic tones under a syllabic envelope, mixed with
//! coloured noise at fixed SNRs.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{mix_at_snr, AudioBuffer, DEFAULT_SAMPLE_RATE};
use crate::error::Result;

/// Mixing SNRs in dB.
pub const SNR_GRID_DB: [f64; 7] = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0];

/// RMS of generated clean clips.
pub const CLEAN_RMS: f64 = 0.05;

/// 3 to 5 harmonics of a gliding fundamental in 100–250 Hz, amplitude-modulated at a
/// syllable-like rate, normalized to [`CLEAN_RMS`].
pub fn harmonic_speech(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let harmonics = rng.gen_range(3..=5);
    let f0 = rng.gen_range(100.0..250.0);
    let glide = rng.gen_range(-0.3..0.3);
    let syllable_hz = rng.gen_range(2.0..6.0);
    let env_phase = rng.gen_range(0.0..2.0 * PI);
    let amps: Vec<f64> = (0..harmonics).map(|k| rng.gen_range(0.5..1.0) / (k + 1) as f64).collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let dur = len as f64 / sr;
    let mut theta = 0.0;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / sr;
        let f = f0 * (1.0 + glide * (t / dur.max(1e-9) - 0.5));
        theta += 2.0 * PI * f / sr;
        let env = 0.5 - 0.5 * (2.0 * PI * syllable_hz * t + env_phase).cos();
        let s: f64 = amps.iter().zip(&phases).enumerate().map(|(k, (a, p))| a * ((k + 1) as f64 * theta + p).sin()).sum();
        out.push(env * env * s);
    }
    normalize(&mut out, CLEAN_RMS);
    out
}

/// White noise through a random first-order low- or high-pass filter.
pub fn filtered_noise(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let a: f64 = rng.gen_range(0.3..0.95);
    let highpass = rng.gen_bool(0.5);
    let mut prev_in = 0.0;
    let mut prev_out = 0.0;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let x: f64 = rng.gen_range(-1.0..1.0);
        let y = if highpass { a * (prev_out + x - prev_in) } else { (1.0 - a) * x + a * prev_out };
        prev_in = x;
        prev_out = y;
        out.push(y);
    }
    normalize(&mut out, CLEAN_RMS);
    out
}

fn normalize(x: &mut [f64], rms: f64) {
    let cur = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if cur > 0.0 {
        x.iter_mut().for_each(|v| *v *= rms / cur);
    }
}

#[derive(Clone, Debug)]
pub struct ToyPair {
    pub clean: AudioBuffer,
    pub noisy: AudioBuffer,
    pub snr_db: f64,
}

/// `count` pairs of `len` samples; pair `i` is mixed at `SNR_GRID_DB[i % 7]`.
pub fn toy_pairs(count: usize, len: usize, seed: u64) -> Result<Vec<ToyPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let clean = AudioBuffer::new(harmonic_speech(len, &mut rng), DEFAULT_SAMPLE_RATE)?;
            let noise = AudioBuffer::new(filtered_noise(len, &mut rng), DEFAULT_SAMPLE_RATE)?;
            let snr_db = SNR_GRID_DB[i % SNR_GRID_DB.len()];
            let noisy = mix_at_snr(&clean, &noise, snr_db)?;
            Ok(ToyPair { clean, noisy, snr_db })
        })
        .collect()
}
