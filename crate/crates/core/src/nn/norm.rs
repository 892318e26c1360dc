//! Channel-wise normalization and activation ops over `[B, C, T, F]` maps.

use crate::error::{shape_err, Result};
use crate::par;
use crate::tensor::ops::moments;
use crate::tensor::{Array, BackwardCtx, Graph, Real, Var};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

fn channel_dims(op: &'static str, x: &[usize], param: &[usize]) -> Result<(usize, usize)> {
    if x.len() < 2 || param != [x[1]] {
        return shape_err(op, format!("input {x:?} with per-channel parameter {param:?}"));
    }
    Ok((x[1], x[2..].iter().product()))
}

impl<T: Real> Graph<T> {
    /// Per-(item, channel) plane normalization with a learnable per-channel affine.
    pub fn instance_norm(&mut self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let (c, plane) = channel_dims("instance_norm", x.shape(), gamma.shape())?;
        if beta.shape() != gamma.shape() {
            return shape_err("instance_norm", format!("beta {:?}", beta.shape()));
        }
        let eps = T::c(eps);
        let (xv, gv, bv) = (x.value().data(), gamma.value().data(), beta.value().data());
        let mut out = vec![T::zero(); xv.len()];
        par::for_each_chunk_mut(&mut out, plane, |pi, o| {
            let src = &xv[pi * plane..(pi + 1) * plane];
            let (mu, inv) = moments(src, eps);
            let (g, b) = (gv[pi % c], bv[pi % c]);
            for (d, s) in o.iter_mut().zip(src) {
                *d = (*s - mu) * inv * g + b;
            }
        });
        let value = Array::new(x.shape(), out)?;
        self.record("instance_norm", value, &[x, gamma, beta], move |ctx: &BackwardCtx<'_, T>| {
            let (xv, gv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let n = T::c(plane as f64);
            let mut gx = vec![T::zero(); xv.len()];
            let mut ggam = vec![T::zero(); c];
            let mut gbet = vec![T::zero(); c];
            for (pi, dst) in gx.chunks_mut(plane).enumerate() {
                let src = &xv[pi * plane..(pi + 1) * plane];
                let gp = &g[pi * plane..(pi + 1) * plane];
                let (mu, inv) = moments(src, eps);
                let (mut m1, mut m2) = (T::zero(), T::zero());
                for (s, d) in src.iter().zip(gp) {
                    let xh = (*s - mu) * inv;
                    m1 += *d;
                    m2 += *d * xh;
                }
                ggam[pi % c] += m2;
                gbet[pi % c] += m1;
                let scale = gv[pi % c] * inv;
                for ((o, s), d) in dst.iter_mut().zip(src).zip(gp) {
                    let xh = (*s - mu) * inv;
                    *o = scale * (*d - m1 / n - xh * m2 / n);
                }
            }
            Ok(vec![
                Some(Array::from_parts(ctx.inputs[0].shape().to_vec(), gx)),
                Some(Array::from_parts(vec![c], ggam)),
                Some(Array::from_parts(vec![c], gbet)),
            ])
        })
    }

    /// `x` for `x ≥ 0`, `a[c]·x` otherwise, with the slope indexed by axis 1.
    pub fn prelu(&mut self, x: &Var<T>, a: &Var<T>) -> Result<Var<T>> {
        let (c, plane) = channel_dims("prelu", x.shape(), a.shape())?;
        let (xv, av) = (x.value().data(), a.value().data());
        let mut out = vec![T::zero(); xv.len()];
        par::for_each_chunk_mut(&mut out, plane, |pi, o| {
            let s = av[pi % c];
            for (d, v) in o.iter_mut().zip(&xv[pi * plane..]) {
                *d = if *v >= T::zero() { *v } else { s * *v };
            }
        });
        let value = Array::new(x.shape(), out)?;
        self.record("prelu", value, &[x, a], move |ctx: &BackwardCtx<'_, T>| {
            let (xv, av, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut gx = vec![T::zero(); xv.len()];
            let mut ga = vec![T::zero(); c];
            for (i, (d, v)) in gx.iter_mut().zip(xv).enumerate() {
                let ch = (i / plane) % c;
                if *v >= T::zero() {
                    *d = g[i];
                } else {
                    *d = g[i] * av[ch];
                    ga[ch] += g[i] * *v;
                }
            }
            Ok(vec![
                Some(Array::from_parts(ctx.inputs[0].shape().to_vec(), gx)),
                Some(Array::from_parts(vec![c], ga)),
            ])
        })
    }

    /// Adds a per-channel vector along axis 1.
    pub fn add_channel_bias(&mut self, x: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (c, plane) = channel_dims("add_channel_bias", x.shape(), b.shape())?;
        let bv = b.value().data();
        let out: Vec<T> = x.value().data().iter().enumerate().map(|(i, v)| *v + bv[(i / plane) % c]).collect();
        let value = Array::new(x.shape(), out)?;
        self.record("add_channel_bias", value, &[x, b], move |ctx: &BackwardCtx<'_, T>| {
            let g = ctx.grad.data();
            let mut gb = vec![T::zero(); c];
            for (i, v) in g.iter().enumerate() {
                gb[(i / plane) % c] += *v;
            }
            Ok(vec![Some(ctx.grad.clone()), Some(Array::from_parts(vec![c], gb))])
        })
    }
}
