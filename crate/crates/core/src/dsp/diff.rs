//! STFT and iSTFT as graph operations; their backward passes are the adjoints.

use crate::error::{shape_err, Result};
use crate::par;
use crate::tensor::{Array, BackwardCtx, Graph, Real, Var};

use super::stft::{SpecPlanes, StftPlan};

fn split_planes<T: Real>(data: &[T], frames: usize, bins: usize) -> SpecPlanes<T> {
    let n = frames * bins;
    SpecPlanes { re: data[..n].to_vec(), im: data[n..2 * n].to_vec(), frames, bins }
}

fn join_planes<T: Real>(p: SpecPlanes<T>) -> Vec<T> {
    let mut v = p.re;
    v.extend(p.im);
    v
}

impl<T: Real> Graph<T> {
    /// `[B, L]` waveforms → `[B, 2, frames, bins]` (real plane, imaginary plane).
    pub fn stft(&mut self, x: &Var<T>, plan: &StftPlan<T>) -> Result<Var<T>> {
        let &[b, len] = x.shape() else {
            return shape_err("stft", format!("expected [B, L], got {:?}", x.shape()));
        };
        let (frames, bins) = (plan.config().frames(len), plan.config().bins());
        let xv = x.value().data();
        let per: Vec<Result<SpecPlanes<T>>> = par::map_indexed(b, |i| plan.forward(&xv[i * len..(i + 1) * len]));
        let mut out = Vec::with_capacity(b * 2 * frames * bins);
        for p in per {
            out.extend(join_planes(p?));
        }
        let value = Array::new(&[b, 2, frames, bins], out)?;
        let plan = plan.clone();
        self.record("stft", value, &[x], move |ctx: &BackwardCtx<'_, T>| {
            let g = ctx.grad.data();
            let per: Vec<Vec<T>> = par::map_indexed(b, |i| {
                let s = split_planes(&g[i * 2 * frames * bins..], frames, bins);
                plan.forward_adjoint(&s, len)
            });
            Ok(vec![Some(Array::new(&[b, len], per.concat())?)])
        })
    }

    /// `[B, 2, frames, bins]` → `[B, out_len]` waveforms.
    pub fn istft(&mut self, spec: &Var<T>, plan: &StftPlan<T>, out_len: usize) -> Result<Var<T>> {
        let &[b, two, frames, bins] = spec.shape() else {
            return shape_err("istft", format!("expected [B, 2, T, F], got {:?}", spec.shape()));
        };
        if two != 2 || bins != plan.config().bins() {
            return shape_err("istft", format!("{:?} does not match {} bins", spec.shape(), plan.config().bins()));
        }
        let sv = spec.value().data();
        let per: Vec<Result<Vec<T>>> = par::map_indexed(b, |i| {
            plan.inverse(&split_planes(&sv[i * 2 * frames * bins..], frames, bins), out_len)
        });
        let mut out = Vec::with_capacity(b * out_len);
        for p in per {
            out.extend(p?);
        }
        let value = Array::new(&[b, out_len], out)?;
        let plan = plan.clone();
        self.record("istft", value, &[spec], move |ctx: &BackwardCtx<'_, T>| {
            let g = ctx.grad.data();
            let per: Vec<Result<SpecPlanes<T>>> =
                par::map_indexed(b, |i| plan.inverse_adjoint(&g[i * out_len..(i + 1) * out_len], frames));
            let mut d = Vec::with_capacity(b * 2 * frames * bins);
            for p in per {
                d.extend(join_planes(p?));
            }
            Ok(vec![Some(Array::new(&[b, 2, frames, bins], d)?)])
        })
    }
}
