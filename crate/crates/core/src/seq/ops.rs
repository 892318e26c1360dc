//! Fused sequence kernels: the selective scan and the causal depthwise 1-D conv.

use crate::error::{shape_err, Result};
use crate::par;
use crate::tensor::{Array, BackwardCtx, Graph, Real, Var};

/// Extents shared by the scan inputs.
#[derive(Clone, Copy, Debug)]
struct ScanDims {
    len: usize,
    d: usize,
    n: usize,
}

/// One batch item's scan inputs. `at` is `A` transposed to `[n, d]`: the state is kept
/// as `[n, d]` so every inner loop runs over contiguous channels and vectorizes.
#[derive(Clone, Copy)]
struct ScanItem<'a, T> {
    dims: ScanDims,
    u: &'a [T],
    dt: &'a [T],
    at: &'a [T],
    b: &'a [T],
    c: &'a [T],
    dskip: &'a [T],
}

/// Gradient buffers of one batch item; `da` is `[n, d]`.
struct ScanGrads<T> {
    du: Vec<T>,
    ddt: Vec<T>,
    db: Vec<T>,
    dc: Vec<T>,
    da: Vec<T>,
    dd: Vec<T>,
}

/// Dot product with a fixed 8-lane summation order, so results do not depend on the
/// instruction set the caller was compiled for.
#[inline(always)]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for l in lanes {
        s += l;
    }
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// Runs the recurrence, writing `y`. With `KEEP`, also writes every hidden state into
/// `hs` and every decay factor `exp(Δ_t·A)` into `abars`, both `[len, n, d]`.
#[inline(always)]
fn scan_fwd_body<T: Real, const KEEP: bool>(it: ScanItem<'_, T>, y: &mut [T], hs: &mut [T], abars: &mut [T]) {
    let ScanDims { len, d, n } = it.dims;
    let mut h = vec![T::zero(); n * d];
    let mut du = vec![T::zero(); d];
    for t in 0..len {
        let (dtt, ut) = (&it.dt[t * d..(t + 1) * d], &it.u[t * d..(t + 1) * d]);
        let yt = &mut y[t * d..(t + 1) * d];
        for i in 0..d {
            du[i] = dtt[i] * ut[i];
            yt[i] = it.dskip[i] * ut[i];
        }
        for s in 0..n {
            let (bs, cs) = (it.b[t * n + s], it.c[t * n + s]);
            let hr = &mut h[s * d..(s + 1) * d];
            let ar = &it.at[s * d..(s + 1) * d];
            if KEEP {
                let ab = &mut abars[(t * n + s) * d..(t * n + s + 1) * d];
                for i in 0..d {
                    let e = (dtt[i] * ar[i]).fast_exp();
                    let v = e * hr[i] + du[i] * bs;
                    hr[i] = v;
                    yt[i] += cs * v;
                    ab[i] = e;
                }
            } else {
                for i in 0..d {
                    let v = (dtt[i] * ar[i]).fast_exp() * hr[i] + du[i] * bs;
                    hr[i] = v;
                    yt[i] += cs * v;
                }
            }
        }
        if KEEP {
            hs[t * n * d..(t + 1) * n * d].copy_from_slice(&h);
        }
    }
}

/// Reverse pass for one item given the output gradient `gy: [len, d]`.
#[inline(always)]
fn scan_bwd_body<T: Real>(it: ScanItem<'_, T>, gy: &[T]) -> ScanGrads<T> {
    let ScanDims { len, d, n } = it.dims;
    let (ld, ln, nd) = (len * d, len * n, n * d);
    let mut y = vec![T::zero(); ld];
    let mut hs = vec![T::zero(); len * nd];
    let mut abars = vec![T::zero(); len * nd];
    scan_fwd_body::<T, true>(it, &mut y, &mut hs, &mut abars);
    let mut gr = ScanGrads {
        du: vec![T::zero(); ld],
        ddt: vec![T::zero(); ld],
        db: vec![T::zero(); ln],
        dc: vec![T::zero(); ln],
        da: vec![T::zero(); nd],
        dd: vec![T::zero(); d],
    };
    let zeros = vec![T::zero(); nd];
    let mut dh = vec![T::zero(); nd];
    let (mut dus, mut dbu, mut dabs) = (vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d]);
    for t in (0..len).rev() {
        let (dtt, ut, gyt) = (&it.dt[t * d..(t + 1) * d], &it.u[t * d..(t + 1) * d], &gy[t * d..(t + 1) * d]);
        for i in 0..d {
            gr.dd[i] += gyt[i] * ut[i];
            dus[i] = dtt[i] * ut[i];
            dbu[i] = T::zero();
            dabs[i] = T::zero();
        }
        let hprev = if t > 0 { &hs[(t - 1) * nd..t * nd] } else { &zeros[..] };
        for s in 0..n {
            let r = s * d..(s + 1) * d;
            let o = t * nd + s * d;
            let (h, hp, ab, ar) = (&hs[o..o + d], &hprev[r.clone()], &abars[o..o + d], &it.at[r.clone()]);
            let (bs, cs) = (it.b[t * n + s], it.c[t * n + s]);
            gr.dc[t * n + s] = dot(gyt, h);
            let dhr = &mut dh[r.clone()];
            for i in 0..d {
                dhr[i] += gyt[i] * cs;
            }
            gr.db[t * n + s] = dot(dhr, &dus);
            let dar = &mut gr.da[r];
            for i in 0..d {
                let dab = dhr[i] * hp[i] * ab[i];
                dabs[i] += dab * ar[i];
                dbu[i] += dhr[i] * bs;
                dar[i] += dab * dtt[i];
                dhr[i] *= ab[i];
            }
        }
        for i in 0..d {
            gr.du[t * d + i] = gyt[i] * it.dskip[i] + dbu[i] * dtt[i];
            gr.ddt[t * d + i] = dabs[i] + dbu[i] * ut[i];
        }
    }
    gr
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn scan_fwd_avx2<T: Real>(it: ScanItem<'_, T>, y: &mut [T]) {
    scan_fwd_body::<T, false>(it, y, &mut [], &mut [])
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn scan_bwd_avx2<T: Real>(it: ScanItem<'_, T>, gy: &[T]) -> ScanGrads<T> {
    scan_bwd_body(it, gy)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// The kernels are compiled twice; the AVX2 copy is taken when the CPU has it. Both
/// perform the same operations in the same order.
fn scan_fwd<T: Real>(it: ScanItem<'_, T>, y: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the feature was detected at run time.
        return unsafe { scan_fwd_avx2(it, y) };
    }
    scan_fwd_body::<T, false>(it, y, &mut [], &mut [])
}

fn scan_bwd<T: Real>(it: ScanItem<'_, T>, gy: &[T]) -> ScanGrads<T> {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: as above.
        return unsafe { scan_bwd_avx2(it, gy) };
    }
    scan_bwd_body(it, gy)
}

/// `[r, c]` → `[c, r]`.
fn transpose<T: Real>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

impl<T: Real> Graph<T> {
    /// Selective state-space scan per batch item and channel `d`:
    ///
    /// `h_t = exp(Δ_t·A) ⊙ h_{t−1} + Δ_t·B_t·u_t`, `y_t = C_t·h_t + D·u_t`, `h_{−1} = 0`.
    ///
    /// Shapes: `u, delta: [batch, len, d]`, `a: [d, n]`, `b, c: [batch, len, n]`, `dskip: [d]`.
    pub fn selective_scan(
        &mut self,
        u: &Var<T>,
        delta: &Var<T>,
        a: &Var<T>,
        b: &Var<T>,
        c: &Var<T>,
        dskip: &Var<T>,
    ) -> Result<Var<T>> {
        let &[batch, len, d] = u.shape() else {
            return shape_err("selective_scan", format!("u {:?}", u.shape()));
        };
        let n = a.shape().get(1).copied().unwrap_or(0);
        let ok = delta.shape() == u.shape()
            && a.shape() == [d, n]
            && b.shape() == [batch, len, n]
            && c.shape() == [batch, len, n]
            && dskip.shape() == [d];
        if !ok || n == 0 {
            return shape_err(
                "selective_scan",
                format!(
                    "u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
                    u.shape(),
                    delta.shape(),
                    a.shape(),
                    b.shape(),
                    c.shape(),
                    dskip.shape()
                ),
            );
        }
        if delta.value().data().iter().any(|v| *v <= T::zero()) {
            return Err(crate::Error::Invalid("selective_scan: non-positive step size".into()));
        }
        let dims = ScanDims { len, d, n };
        let (ud, dd, ad, bd, cd, sd) = (
            u.value().data(),
            delta.value().data(),
            a.value().data(),
            b.value().data(),
            c.value().data(),
            dskip.value().data(),
        );
        let (ld, ln) = (len * d, len * n);
        let at = transpose(ad, d, n);
        let mut out = vec![T::zero(); batch * ld];
        par::for_each_chunk_mut(&mut out, ld, |bi, o| {
            let it = ScanItem {
                dims,
                u: &ud[bi * ld..(bi + 1) * ld],
                dt: &dd[bi * ld..(bi + 1) * ld],
                at: &at,
                b: &bd[bi * ln..(bi + 1) * ln],
                c: &cd[bi * ln..(bi + 1) * ln],
                dskip: sd,
            };
            scan_fwd(it, o);
        });
        let value = Array::new(&[batch, len, d], out)?;
        self.record("selective_scan", value, &[u, delta, a, b, c, dskip], move |ctx: &BackwardCtx<'_, T>| {
            let inp = ctx.inputs;
            let (ud, dd, bd, cd, sd) = (inp[0].data(), inp[1].data(), inp[3].data(), inp[4].data(), inp[5].data());
            let at = transpose(inp[2].data(), d, n);
            let g = ctx.grad.data();
            let items: Vec<ScanGrads<T>> = par::map_indexed(batch, |bi| {
                let it = ScanItem {
                    dims,
                    u: &ud[bi * ld..(bi + 1) * ld],
                    dt: &dd[bi * ld..(bi + 1) * ld],
                    at: &at,
                    b: &bd[bi * ln..(bi + 1) * ln],
                    c: &cd[bi * ln..(bi + 1) * ln],
                    dskip: sd,
                };
                scan_bwd(it, &g[bi * ld..(bi + 1) * ld])
            });
            let mut du = Vec::with_capacity(batch * ld);
            let mut ddt = Vec::with_capacity(batch * ld);
            let mut db = Vec::with_capacity(batch * ln);
            let mut dc = Vec::with_capacity(batch * ln);
            let mut da_t = vec![T::zero(); d * n];
            let mut dsk = vec![T::zero(); d];
            for it in items {
                du.extend(it.du);
                ddt.extend(it.ddt);
                db.extend(it.db);
                dc.extend(it.dc);
                da_t.iter_mut().zip(it.da).for_each(|(a, v)| *a += v);
                dsk.iter_mut().zip(it.dd).for_each(|(a, v)| *a += v);
            }
            Ok(vec![
                Some(Array::from_parts(vec![batch, len, d], du)),
                Some(Array::from_parts(vec![batch, len, d], ddt)),
                Some(Array::from_parts(vec![d, n], transpose(&da_t, n, d))),
                Some(Array::from_parts(vec![batch, len, n], db)),
                Some(Array::from_parts(vec![batch, len, n], dc)),
                Some(Array::from_parts(vec![d], dsk)),
            ])
        })
    }

    /// Causal depthwise conv over the sequence axis of `x: [batch, len, d]` with
    /// `w: [d, k]`, `b: [d]`: `y_t = b + Σ_j w[j]·x_{t−k+1+j}` (zero before the start).
    pub fn causal_conv1d(&mut self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let &[batch, len, d] = x.shape() else {
            return shape_err("causal_conv1d", format!("x {:?}", x.shape()));
        };
        let k = w.shape().get(1).copied().unwrap_or(0);
        if w.shape() != [d, k] || b.shape() != [d] || k == 0 {
            return shape_err("causal_conv1d", format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()));
        }
        let (xv, wv, bv) = (x.value().data(), w.value().data(), b.value().data());
        let ld = len * d;
        let mut out = vec![T::zero(); batch * ld];
        par::for_each_chunk_mut(&mut out, ld, |bi, o| {
            let xs = &xv[bi * ld..(bi + 1) * ld];
            for t in 0..len {
                for i in 0..d {
                    let mut acc = bv[i];
                    for j in 0..k {
                        if let Some(src) = (t + j + 1).checked_sub(k) {
                            acc += wv[i * k + j] * xs[src * d + i];
                        }
                    }
                    o[t * d + i] = acc;
                }
            }
        });
        let value = Array::new(x.shape(), out)?;
        self.record("causal_conv1d", value, &[x, w, b], move |ctx: &BackwardCtx<'_, T>| {
            let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut gx = vec![T::zero(); xv.len()];
            let mut gw = vec![T::zero(); d * k];
            let mut gb = vec![T::zero(); d];
            for bi in 0..batch {
                let o = bi * ld;
                for t in 0..len {
                    for i in 0..d {
                        let gi = g[o + t * d + i];
                        gb[i] += gi;
                        for j in 0..k {
                            if let Some(src) = (t + j + 1).checked_sub(k) {
                                gw[i * k + j] += gi * xv[o + src * d + i];
                                gx[o + src * d + i] += gi * wv[i * k + j];
                            }
                        }
                    }
                }
            }
            Ok(vec![
                Some(Array::from_parts(ctx.inputs[0].shape().to_vec(), gx)),
                Some(Array::from_parts(vec![d, k], gw)),
                Some(Array::from_parts(vec![d], gb)),
            ])
        })
    }
}
