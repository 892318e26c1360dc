use std::collections::HashMap;

use crate::dsp::StftPlan;
use crate::error::{shape_err, Result};
use crate::model::{compressed_polar, RwsaMambaUNet};
use crate::tensor::optim::AdamW;
use crate::tensor::{Array, Graph, ParamId, ParamStore, Real};

use super::losses::{compute_losses, LossTerms, LossWeights, SpectralView};

/// Loss components of one step, `[total, time, mag, complex, phase, consistency]`.
pub type LossValues = [f64; 6];

/// Builds the forward pass and every loss term on `g`.
pub fn losses_on_graph<T: Real>(
    g: &mut Graph<T>,
    model: &RwsaMambaUNet,
    store: &ParamStore<T>,
    noisy: &Array<T>,
    clean: &Array<T>,
    w: &LossWeights,
) -> Result<LossTerms<T>> {
    if noisy.shape() != clean.shape() || noisy.rank() != 2 {
        return shape_err("train_step", format!("noisy {:?} vs clean {:?}", noisy.shape(), clean.shape()));
    }
    let x = g.constant(noisy.clone());
    let out = model.forward(g, store, &x)?;
    let plan = StftPlan::<T>::new(model.cfg.stft)?;
    let len = clean.shape()[1];
    let c = g.constant(clean.clone());
    let cp = if out.padded_len > len { g.pad(&c, 1, 0, out.padded_len - len)? } else { c.clone() };
    let (mag_c, phase) = compressed_polar(g, &plan, &cp, model.cfg.compress)?;
    let reference = SpectralView { wave: c, mag_c, phase };
    let est = SpectralView { wave: out.wave, mag_c: out.mag_c, phase: out.phase };
    compute_losses(g, &est, &out.spec, &reference, w, &plan, out.padded_len)
}

/// One forward and backward pass on `[B, L]` noisy/clean batches; returns the loss
/// values and the gradient of every parameter slot that received one.
pub fn loss_and_grads<T: Real>(
    model: &RwsaMambaUNet,
    store: &ParamStore<T>,
    noisy: &Array<T>,
    clean: &Array<T>,
    w: &LossWeights,
) -> Result<(LossValues, HashMap<ParamId, Array<T>>)> {
    let mut g = Graph::<T>::new();
    let terms = losses_on_graph(&mut g, model, store, noisy, clean, w)?;
    let values = terms.check_finite()?;
    let grads = g.backward(&terms.total)?.into_params();
    Ok((values, grads))
}

/// Model, weights and optimizer state for the training loop.
pub struct Trainer<T: Real> {
    pub model: RwsaMambaUNet,
    pub store: ParamStore<T>,
    pub opt: AdamW,
    pub weights: LossWeights,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: RwsaMambaUNet, store: ParamStore<T>, lr: f64, weights: LossWeights) -> Self {
        Self { model, store, opt: AdamW::new(lr), weights }
    }

    /// One forward, one backward, one optimizer update. Tied slots are updated once
    /// from their accumulated gradient.
    pub fn step(&mut self, noisy: &Array<T>, clean: &Array<T>) -> Result<LossValues> {
        let (values, grads) = loss_and_grads(&self.model, &self.store, noisy, clean, &self.weights)?;
        self.opt.step(&mut self.store, &grads);
        Ok(values)
    }

    /// Loss without updating anything.
    pub fn evaluate(&self, noisy: &Array<T>, clean: &Array<T>) -> Result<LossValues> {
        let mut g = Graph::<T>::inference();
        losses_on_graph(&mut g, &self.model, &self.store, noisy, clean, &self.weights)?.check_finite()
    }
}

/// Stacks equal-length clips into a `[B, L]` array.
pub fn batch<T: Real>(clips: &[&[f64]]) -> Result<Array<T>> {
    let len = clips.first().map_or(0, |c| c.len());
    if clips.iter().any(|c| c.len() != len) {
        return shape_err("batch", "clips of different lengths");
    }
    let flat: Vec<f64> = clips.iter().flat_map(|c| c.iter().copied()).collect();
    Array::from_f64(&[clips.len(), len], &flat)
}
