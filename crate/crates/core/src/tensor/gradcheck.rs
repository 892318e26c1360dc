//! Central finite-difference gradient checks at 64-bit precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Array, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst per-input relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub probes: usize,
    /// Input (or parameter) index with the worst relative error.
    pub worst: usize,
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `eps`. At most `max_probes` coordinates per input are
/// perturbed (chosen with `seed`).
pub fn check<F>(f: F, inputs: &[Array<f64>], eps: f64, max_probes: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut g = Graph::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(&root)?;
    let eval = |xs: &[Array<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vs: Vec<Var<f64>> = xs.iter().map(|a| g.constant(a.clone())).collect();
        Ok(f(&mut g, &vs)?.value().item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, probes: 0, worst: 0 };
    for (k, v) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let zero = Array::zeros(inputs[k].shape());
        let analytic = grads.wrt(v).unwrap_or(&zero);
        let idx: Vec<usize> = if n <= max_probes { (0..n).collect() } else { sample(&mut rng, n, max_probes).into_vec() };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += eps;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] -= 2.0 * eps;
            let down = eval(&xs)?;
            let num = (up - down) / (2.0 * eps);
            let an = analytic.data()[i];
            diff2 += (an - num).powi(2);
            a2 += an * an;
            n2 += num * num;
            report.max_abs_err = report.max_abs_err.max((an - num).abs());
            report.probes += 1;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel = if denom > 1e-300 { diff2.sqrt() / denom } else { 0.0 };
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = k;
        }
    }
    Ok(report)
}

/// Like [`check`], but differentiates with respect to every trainable parameter of
/// `store` (each perturbed through its canonical storage, so tied sites move together).
pub fn check_params<F>(f: F, store: &ParamStore<f64>, eps: f64, max_probes: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var<f64>>,
{
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    let grads = g.backward(&root)?;
    let eval = |s: &ParamStore<f64>| -> Result<f64> { Ok(f(&mut Graph::inference(), s)?.value().item()) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, probes: 0, worst: 0 };
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.value(id).len();
        let zero = Array::zeros(store.value(id).shape());
        let analytic = grads.param(id).unwrap_or(&zero);
        let idx: Vec<usize> = if n <= max_probes { (0..n).collect() } else { sample(&mut rng, n, max_probes).into_vec() };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let num = (up - down) / (2.0 * eps);
            let an = analytic.data()[i];
            diff2 += (an - num).powi(2);
            a2 += an * an;
            n2 += num * num;
            report.max_abs_err = report.max_abs_err.max((an - num).abs());
            report.probes += 1;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel = if denom > 1e-300 { diff2.sqrt() / denom } else { 0.0 };
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = k;
        }
    }
    Ok(report)
}
