//! Centered STFT and weighted overlap-add iSTFT, with their exact adjoints.
//!
//! Both transforms are real-linear maps between a waveform and the `(re, im)`
//! planes of a one-sided spectrogram. The adjoints are what the differentiable
//! graph ops use for back-propagation.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// STFT geometry. Defaults: 510-point FFT, 510-sample periodic Hann, hop 120, centered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop: usize,
    pub centered: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { n_fft: 510, win_length: 510, hop: 120, centered: true }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.win_length == 0 || self.win_length > self.n_fft {
            return Err(Error::Invalid(format!("win_length {} must be in 1..={}", self.win_length, self.n_fft)));
        }
        if self.hop == 0 || self.hop >= self.win_length {
            return Err(Error::Invalid(format!("hop {} must be in 1..{}", self.hop, self.win_length)));
        }
        Ok(())
    }

    /// Number of one-sided frequency bins, `n_fft/2 + 1`.
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn pad(&self) -> usize {
        if self.centered {
            self.n_fft / 2
        } else {
            0
        }
    }

    /// Frame count for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        let padded = len + 2 * self.pad();
        if padded < self.n_fft {
            0
        } else {
            1 + (padded - self.n_fft) / self.hop
        }
    }

    /// Periodic Hann of `win_length`, zero-padded symmetrically to `n_fft`.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_fft];
        let left = (self.n_fft - self.win_length) / 2;
        for n in 0..self.win_length {
            w[left + n] = 0.5 - 0.5 * (2.0 * PI * n as f64 / self.win_length as f64).cos();
        }
        w
    }
}

/// Mirror index for reflect padding (edge sample not repeated), valid for any offset.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Cached FFT plans and window for one [`StftConfig`].
#[derive(Clone)]
pub struct StftPlan<T: Real> {
    cfg: StftConfig,
    window: Vec<T>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for StftPlan<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("cfg", &self.cfg).finish()
    }
}

/// One-sided spectrogram planes, each `frames × bins` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecPlanes<T> {
    pub re: Vec<T>,
    pub im: Vec<T>,
    pub frames: usize,
    pub bins: usize,
}

impl<T: Real> StftPlan<T> {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: cfg.window().into_iter().map(T::c).collect(),
            fwd: planner.plan_fft_forward(cfg.n_fft),
            inv: planner.plan_fft_inverse(cfg.n_fft),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Forward STFT of one waveform.
    pub fn forward(&self, x: &[T]) -> Result<SpecPlanes<T>> {
        if x.is_empty() {
            return Err(Error::Audio("STFT of an empty signal".into()));
        }
        let (n, hop, pad) = (self.cfg.n_fft, self.cfg.hop, self.cfg.pad() as isize);
        let frames = self.cfg.frames(x.len());
        if frames == 0 {
            return Err(Error::Audio(format!("{} samples is shorter than one frame", x.len())));
        }
        let bins = self.cfg.bins();
        let mut re = vec![T::zero(); frames * bins];
        let mut im = vec![T::zero(); frames * bins];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.fwd.get_inplace_scratch_len()];
        for t in 0..frames {
            for (k, b) in buf.iter_mut().enumerate() {
                let src = (t * hop) as isize + k as isize - pad;
                let v = if pad > 0 { x[reflect(src, x.len())] } else { x[src as usize] };
                *b = Complex::new(v * self.window[k], T::zero());
            }
            self.fwd.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                re[t * bins + k] = buf[k].re;
                im[t * bins + k] = buf[k].im;
            }
        }
        Ok(SpecPlanes { re, im, frames, bins })
    }

    /// Adjoint of [`forward`](Self::forward) for a signal of `len` samples.
    pub fn forward_adjoint(&self, spec: &SpecPlanes<T>, len: usize) -> Vec<T> {
        let (n, hop, pad) = (self.cfg.n_fft, self.cfg.hop, self.cfg.pad() as isize);
        let mut out = vec![T::zero(); len];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.inv.get_inplace_scratch_len()];
        for t in 0..spec.frames {
            for b in buf.iter_mut() {
                *b = Complex::new(T::zero(), T::zero());
            }
            for k in 0..spec.bins {
                buf[k] = Complex::new(spec.re[t * spec.bins + k], spec.im[t * spec.bins + k]);
            }
            self.inv.process_with_scratch(&mut buf, &mut scratch);
            for (k, b) in buf.iter().enumerate() {
                let src = (t * hop) as isize + k as isize - pad;
                let idx = if pad > 0 { reflect(src, len) } else { src as usize };
                out[idx] += b.re * self.window[k];
            }
        }
        out
    }

    /// Squared-window overlap-add envelope over the padded span.
    fn envelope(&self, frames: usize) -> Vec<T> {
        let n = self.cfg.n_fft;
        let mut env = vec![T::zero(); (frames - 1) * self.cfg.hop + n];
        for t in 0..frames {
            for k in 0..n {
                env[t * self.cfg.hop + k] += self.window[k] * self.window[k];
            }
        }
        env
    }

    /// Longest output the frames can synthesize (envelope bounded away from zero).
    pub fn max_output_len(&self, frames: usize) -> usize {
        if frames == 0 {
            return 0;
        }
        let env = self.envelope(frames);
        let pad = self.cfg.pad();
        let last = env.iter().rposition(|&e| e.f64() > ENVELOPE_FLOOR).unwrap_or(0);
        (last + 1).saturating_sub(pad)
    }

    fn check_out_len(&self, frames: usize, out_len: usize) -> Result<()> {
        let span = self.max_output_len(frames);
        if out_len == 0 || out_len > span {
            return Err(Error::Invalid(format!("istft output of {out_len} samples exceeds synthesizable span {span}")));
        }
        Ok(())
    }

    /// Inverse STFT (weighted overlap-add, squared-window normalization).
    pub fn inverse(&self, spec: &SpecPlanes<T>, out_len: usize) -> Result<Vec<T>> {
        self.check_out_len(spec.frames, out_len)?;
        let (n, hop, pad) = (self.cfg.n_fft, self.cfg.hop, self.cfg.pad());
        let env = self.envelope(spec.frames);
        let mut acc = vec![T::zero(); env.len()];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.inv.get_inplace_scratch_len()];
        let scale = T::c(1.0 / n as f64);
        for t in 0..spec.frames {
            self.hermitian(spec, t, &mut buf);
            self.inv.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n {
                acc[t * hop + k] += buf[k].re * scale * self.window[k];
            }
        }
        Ok((0..out_len).map(|i| acc[i + pad] / env[i + pad]).collect())
    }

    /// Adjoint of [`inverse`](Self::inverse) for `frames` frames.
    pub fn inverse_adjoint(&self, g: &[T], frames: usize) -> Result<SpecPlanes<T>> {
        self.check_out_len(frames, g.len())?;
        let (n, hop, pad, bins) = (self.cfg.n_fft, self.cfg.hop, self.cfg.pad(), self.cfg.bins());
        let env = self.envelope(frames);
        let mut gp = vec![T::zero(); env.len()];
        for (i, &v) in g.iter().enumerate() {
            gp[i + pad] = v / env[i + pad];
        }
        let mut re = vec![T::zero(); frames * bins];
        let mut im = vec![T::zero(); frames * bins];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.fwd.get_inplace_scratch_len()];
        let inv_n = T::c(1.0 / n as f64);
        for t in 0..frames {
            for k in 0..n {
                buf[k] = Complex::new(gp[t * hop + k] * self.window[k], T::zero());
            }
            self.fwd.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                let edge = k == 0 || (n % 2 == 0 && k == n / 2);
                let c = if edge { inv_n } else { inv_n + inv_n };
                re[t * bins + k] = buf[k].re * c;
                im[t * bins + k] = if edge { T::zero() } else { buf[k].im * c };
            }
        }
        Ok(SpecPlanes { re, im, frames, bins })
    }

    /// Full Hermitian spectrum of frame `t`; imaginary parts of DC and Nyquist are ignored.
    fn hermitian(&self, spec: &SpecPlanes<T>, t: usize, buf: &mut [Complex<T>]) {
        let n = self.cfg.n_fft;
        let bins = spec.bins;
        for k in 0..bins {
            let edge = k == 0 || (n % 2 == 0 && k == n / 2);
            let im = if edge { T::zero() } else { spec.im[t * bins + k] };
            buf[k] = Complex::new(spec.re[t * bins + k], im);
        }
        for k in bins..n {
            buf[k] = buf[n - k].conj();
        }
    }
}

const ENVELOPE_FLOOR: f64 = 1e-10;
