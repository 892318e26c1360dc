use crate::dsp::StftPlan;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Real, Var};

/// Weights of the loss terms. Defaults `(0.2, 0.9, 0.1, 0.3, 0.1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub time: f64,
    pub mag: f64,
    pub complex: f64,
    pub phase: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { time: 0.2, mag: 0.9, complex: 0.1, phase: 0.3, consistency: 0.1 }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.time, self.mag, self.complex, self.phase, self.consistency]
    }

    pub fn scaled(&self, k: f64) -> Self {
        let [time, mag, complex, phase, consistency] = self.as_array().map(|w| w * k);
        Self { time, mag, complex, phase, consistency }
    }

    pub fn validate(&self) -> Result<()> {
        let keys = ["loss.w_time", "loss.w_mag", "loss.w_complex", "loss.w_phase", "loss.w_consistency"];
        for (k, w) in keys.iter().zip(self.as_array()) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config { key: (*k).into(), msg: format!("{w} must be finite and non-negative") });
            }
        }
        if self.as_array().iter().all(|w| *w == 0.0) {
            return Err(Error::Config { key: "loss.w_time".into(), msg: "every loss weight is zero".into() });
        }
        Ok(())
    }
}

/// What the losses see of an estimate or a reference.
pub struct SpectralView<T> {
    /// `[B, L]`.
    pub wave: Var<T>,
    /// Compressed magnitude `[B, T, F]`.
    pub mag_c: Var<T>,
    /// Wrapped phase `[B, T, F]`.
    pub phase: Var<T>,
}

/// Every component and the weighted total, as scalar graph values.
pub struct LossTerms<T> {
    pub total: Var<T>,
    pub time: Var<T>,
    pub mag: Var<T>,
    pub complex: Var<T>,
    pub phase: Var<T>,
    pub consistency: Var<T>,
}

impl<T: Real> LossTerms<T> {
    pub const NAMES: [&'static str; 6] = ["loss_total", "loss_time", "loss_mag", "loss_complex", "loss_phase", "loss_consistency"];

    pub fn values(&self) -> [f64; 6] {
        [&self.total, &self.time, &self.mag, &self.complex, &self.phase, &self.consistency].map(|v| v.value().item().f64())
    }

    /// Fails naming the first non-finite component.
    pub fn check_finite(&self) -> Result<[f64; 6]> {
        let v = self.values();
        for (i, x) in v.iter().enumerate().skip(1).chain(std::iter::once((0, &v[0]))) {
            if !x.is_finite() {
                return Err(Error::NonFiniteLoss(Self::NAMES[i]));
            }
        }
        Ok(v)
    }
}

/// `mean(wrap_abs(a − b))`.
fn anti_wrap<T: Real>(g: &mut Graph<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let d = g.sub(a, b)?;
    let d = g.wrap_abs(&d)?;
    g.mean(&d)
}

/// First difference along `axis`.
fn diff<T: Real>(g: &mut Graph<T>, x: &Var<T>, axis: usize) -> Result<Var<T>> {
    let n = x.shape()[axis];
    let hi = g.slice(x, axis, 1, n - 1)?;
    let lo = g.slice(x, axis, 0, n - 1)?;
    g.sub(&hi, &lo)
}

/// Instantaneous-phase, group-delay and instantaneous-frequency terms, each through
/// the anti-wrapping distance, averaged with equal weight.
pub fn phase_loss<T: Real>(g: &mut Graph<T>, est: &Var<T>, reference: &Var<T>) -> Result<Var<T>> {
    let &[_, t, f] = est.shape() else {
        return shape_err("phase_loss", format!("expected [B, T, F], got {:?}", est.shape()));
    };
    if est.shape() != reference.shape() || t < 2 || f < 2 {
        return shape_err("phase_loss", format!("{:?} vs {:?}", est.shape(), reference.shape()));
    }
    let ip = anti_wrap(g, est, reference)?;
    let (ge, gr) = (diff(g, est, 2)?, diff(g, reference, 2)?);
    let gd = anti_wrap(g, &ge, &gr)?;
    let (ie, ir) = (diff(g, est, 1)?, diff(g, reference, 1)?);
    let iaf = anti_wrap(g, &ie, &ir)?;
    let s = g.add(&ip, &gd)?;
    let s = g.add(&s, &iaf)?;
    g.scale(&s, 1.0 / 3.0)
}

/// `[B, T, F]` compressed magnitude and phase → `[B, 2, T, F]` compressed complex planes.
fn compressed_complex<T: Real>(g: &mut Graph<T>, v: &SpectralView<T>) -> Result<Var<T>> {
    let (cos, sin) = (g.cos(&v.phase)?, g.sin(&v.phase)?);
    let re = g.mul(&v.mag_c, &cos)?;
    let im = g.mul(&v.mag_c, &sin)?;
    g.concat(&[&re, &im], 1)
}

/// Mean over time-frequency bins of `|a − b|²` for `[B, 2·k, ...]` real/imag stacks.
fn complex_mse<T: Real>(g: &mut Graph<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let d = g.sub(a, b)?;
    let d = g.square(&d)?;
    let m = g.mean(&d)?;
    g.scale(&m, 2.0)
}

/// Time-domain, magnitude, complex, phase and consistency terms and their weighted sum.
///
/// `est_spec` is the uncompressed `[B, 2, T, F]` spectrum the estimate was synthesized
/// from; the consistency term compares it with the STFT of its own inverse STFT at
/// `frame_len` samples.
pub fn compute_losses<T: Real>(
    g: &mut Graph<T>,
    est: &SpectralView<T>,
    est_spec: &Var<T>,
    reference: &SpectralView<T>,
    w: &LossWeights,
    plan: &StftPlan<T>,
    frame_len: usize,
) -> Result<LossTerms<T>> {
    for (name, a, b) in [("wave", &est.wave, &reference.wave), ("mag_c", &est.mag_c, &reference.mag_c), ("phase", &est.phase, &reference.phase)] {
        if a.shape() != b.shape() {
            return shape_err("compute_losses", format!("{name}: {:?} vs {:?}", a.shape(), b.shape()));
        }
    }
    let d = g.sub(&est.wave, &reference.wave)?;
    let d = g.abs(&d)?;
    let time = g.mean(&d)?;

    let d = g.sub(&est.mag_c, &reference.mag_c)?;
    let d = g.square(&d)?;
    let mag = g.mean(&d)?;

    let ce = compressed_complex(g, est)?;
    let cr = compressed_complex(g, reference)?;
    let complex = complex_mse(g, &ce, &cr)?;

    let phase = phase_loss(g, &est.phase, &reference.phase)?;

    let y = g.istft(est_spec, plan, frame_len)?;
    let again = g.stft(&y, plan)?;
    let consistency = complex_mse(g, est_spec, &again)?;

    let mut total: Option<Var<T>> = None;
    for (wk, term) in [(w.time, &time), (w.mag, &mag), (w.complex, &complex), (w.phase, &phase), (w.consistency, &consistency)] {
        let s = g.scale(term, wk)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(&acc, &s)?,
        });
    }
    let total = total.expect("five terms");
    Ok(LossTerms { total, time, mag, complex, phase, consistency })
}
