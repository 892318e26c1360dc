//! Decoupled-weight-decay Adam.

use std::collections::HashMap;

use super::{Array, ParamId, ParamStore, Real};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.8, beta2: 0.99, eps: 1e-8, weight_decay: 0.01, step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient. Each canonical
    /// slot is updated exactly once, whatever number of sites reads it.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &HashMap<ParamId, Array<T>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(&id) else { continue };
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let decay = T::c(1.0 - lr * wd);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.f64();
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let upd = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w = *w * decay - T::c(lr * upd);
            }
        }
    }

    pub fn decay_lr(&mut self, gamma: f64) {
        self.lr *= gamma;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_weights_bitwise_unchanged() {
        let mut s = ParamStore::<f32>::new();
        let id = s.register("w", Array::from_f64(&[3], &[0.1, -2.5, 3.25]).unwrap()).unwrap();
        let before = s.value(id).clone();
        let mut opt = AdamW::new(0.0);
        let g: HashMap<_, _> = [(id, Array::from_f64(&[3], &[1.0, -1.0, 0.5]).unwrap())].into();
        opt.step(&mut s, &g);
        assert_eq!(s.value(id).data(), before.data());
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let mut s = ParamStore::<f64>::new();
        let id = s.register("w", Array::from_f64(&[2], &[0.0, 0.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(0.1);
        let g: HashMap<_, _> = [(id, Array::from_f64(&[2], &[2.0, -3.0]).unwrap())].into();
        opt.step(&mut s, &g);
        let w = s.value(id).data();
        assert!((w[0] + 0.1).abs() < 1e-6 && (w[1] - 0.1).abs() < 1e-6);
    }
}
