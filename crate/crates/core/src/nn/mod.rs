//! Convolutional and normalization building blocks.

mod conv;
mod flops;
mod layers;
mod norm;

pub use conv::Conv2dSpec;
pub use flops::{FlopKind, FlopsEntry, FlopsReport};
pub use layers::{Conv2d, ConvBlock, DenseBlock, ItemShape, LearnableSigmoid, NormAct, PatchEmbed, SubPixelConv};
pub use norm::INSTANCE_NORM_EPS;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{Array, Graph, ParamId, ParamStore, Real, Var};

/// Initial value of a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// `values[i] = f(i)`.
    Fn(fn(usize) -> f64),
}

/// Registers parameters under a dotted name prefix, drawing initial values from
/// one seeded stream so a config and seed always produce the same weights.
pub struct ParamBuilder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = self.path(name);
        ParamBuilder { store: &mut *self.store, rng: &mut *self.rng, prefix }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.gen_range(-b..=b)).collect(),
            Init::Fn(f) => (0..n).map(f).collect(),
        };
        let path = self.path(name);
        self.store.register(&path, Array::from_f64(shape, &data)?)
    }

    pub fn store(&mut self) -> &mut ParamStore<T> {
        self.store
    }
}

/// Fan-in scaled uniform bound used for weights and biases alike.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

impl<T: Real> Graph<T> {
    /// Periodic shuffle along the last axis: `[B, r·C, T, F] → [B, C, T, r·F]` with
    /// output bin `f·r + i` taken from input channel `c·r + i`.
    pub fn freq_shuffle(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let &[b, rc, t, f] = x.shape() else {
            return shape_err("freq_shuffle", format!("expected rank 4, got {:?}", x.shape()));
        };
        if r == 0 || rc % r != 0 {
            return shape_err("freq_shuffle", format!("{rc} channels not divisible by {r}"));
        }
        let y = self.reshape(x, &[b, rc / r, r, t, f])?;
        let y = self.permute(&y, &[0, 1, 3, 4, 2])?;
        self.reshape(&y, &[b, rc / r, t, f * r])
    }

    /// Inverse of [`freq_shuffle`](Self::freq_shuffle).
    pub fn freq_unshuffle(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let &[b, c, t, rf] = x.shape() else {
            return shape_err("freq_unshuffle", format!("expected rank 4, got {:?}", x.shape()));
        };
        if r == 0 || rf % r != 0 {
            return shape_err("freq_unshuffle", format!("{rf} bins not divisible by {r}"));
        }
        let y = self.reshape(x, &[b, c, t, rf / r, r])?;
        let y = self.permute(&y, &[0, 1, 4, 2, 3])?;
        self.reshape(&y, &[b, c * r, t, rf / r])
    }
}
