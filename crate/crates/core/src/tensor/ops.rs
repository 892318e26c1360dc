//! Differentiable primitives.
//!
//! Broadcasting is limited to scalar-with-array and trailing-axis expansion: the
//! right operand may have shape `[]`/`[1]` or equal a suffix of the left shape.

use crate::error::{shape_err, Result};
use crate::par;

use super::array::{numel, strides};
use super::graph::{BackwardCtx, Graph, Var};
use super::linalg::gemm;
use super::{Array, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// Right operand repeats every `inner` elements.
    Trailing(usize),
}

fn bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    if numel(b) == 1 && b.len() <= 1 {
        return Ok(Bcast::Scalar);
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok(Bcast::Trailing(numel(b)));
    }
    shape_err(op, format!("cannot broadcast {b:?} onto {a:?}"))
}


/// Sums a full-shape gradient down to the broadcast operand's shape.
fn unbroadcast<T: Real>(g: &Array<T>, kind: Bcast, target: &[usize]) -> Array<T> {
    match kind {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Array::from_parts(target.to_vec(), vec![g.sum()]),
        Bcast::Trailing(inner) => {
            let mut out = vec![T::zero(); inner];
            for row in g.data().chunks(inner) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += *v;
                }
            }
            Array::from_parts(target.to_vec(), out)
        }
    }
}

fn apply_bcast<T: Real>(a: &[T], b: &[T], kind: Bcast, f: impl Fn(T, T) -> T + Sync + Send) -> Vec<T> {
    match kind {
        Bcast::Same => par::zip_map_slice(a, b, f),
        Bcast::Scalar => {
            let s = b[0];
            par::map_slice(a, |x| f(x, s))
        }
        Bcast::Trailing(inner) => {
            let mut out = vec![T::zero(); a.len()];
            let rows = (par::MIN_PARALLEL_LEN / inner).max(1) * inner;
            par::for_each_chunk_mut(&mut out, rows, |ci, o| {
                let base = ci * rows;
                for (j, v) in o.iter_mut().enumerate() {
                    *v = f(a[base + j], b[(base + j) % inner]);
                }
            });
            out
        }
    }
}

/// `(outer, len, inner)` split of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return shape_err(op, format!("axis {axis} out of range for {shape:?}"));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    fn binary(
        &mut self,
        tag: &'static str,
        a: &Var<T>,
        b: &Var<T>,
        f: impl Fn(T, T) -> T + Sync + Send,
        da: impl Fn(T, T, T) -> T + Sync + Send + 'static,
        db: impl Fn(T, T, T) -> T + Sync + Send + 'static,
    ) -> Result<Var<T>> {
        let kind = bcast(tag, a.shape(), b.shape())?;
        let out = apply_bcast(a.value().data(), b.value().data(), kind, f);
        let value = Array::from_parts(a.shape().to_vec(), out);
        self.record(tag, value, &[a, b], move |ctx: &BackwardCtx<'_, T>| {
            let (x, y) = (&ctx.inputs[0], &ctx.inputs[1]);
            let g = ctx.grad.data();
            let yb = |i: usize| match kind {
                Bcast::Same => y.data()[i],
                Bcast::Scalar => y.data()[0],
                Bcast::Trailing(inner) => y.data()[i % inner],
            };
            let ga = ctx.needs[0].then(|| {
                Array::from_parts(
                    x.shape().to_vec(),
                    (0..g.len()).map(|i| da(x.data()[i], yb(i), g[i])).collect(),
                )
            });
            let gb = ctx.needs[1].then(|| {
                let full = Array::from_parts(
                    x.shape().to_vec(),
                    (0..g.len()).map(|i| db(x.data()[i], yb(i), g[i])).collect(),
                );
                unbroadcast(&full, kind, y.shape())
            });
            Ok(vec![ga, gb])
        })
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary("add", a, b, |x, y| x + y, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary("mul", a, b, |x, y| x * y, |_, y, g| g * y, |x, _, g| g * x)
    }

    /// Elementwise `f` with derivative `df(x, f(x))`.
    pub fn unary(
        &mut self,
        tag: &'static str,
        a: &Var<T>,
        f: impl Fn(T) -> T + Sync + Send,
        df: impl Fn(T, T) -> T + Sync + Send + 'static,
    ) -> Result<Var<T>> {
        let value = a.value().map(f);
        self.record(tag, value, &[a], move |ctx: &BackwardCtx<'_, T>| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let out: Vec<T> = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
            Ok(vec![Some(Array::from_parts(ctx.grad.shape().to_vec(), out))])
        })
    }

    pub fn scale(&mut self, a: &Var<T>, s: f64) -> Result<Var<T>> {
        let s = T::c(s);
        self.unary("scale", a, move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, a: &Var<T>, s: f64) -> Result<Var<T>> {
        let s = T::c(s);
        self.unary("add_scalar", a, move |x| x + s, |_, _| T::one())
    }

    pub fn neg(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("neg", a, |x| -x, |_, _| -T::one())
    }

    pub fn exp(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("exp", a, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("ln", a, |x| x.ln(), |x, _| x.recip())
    }

    pub fn sigmoid(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("sigmoid", a, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("silu", a, |x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        })
    }

    pub fn softplus(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("softplus", a, softplus, |x, _| sigmoid(x))
    }

    pub fn tanh(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("tanh", a, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn square(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("square", a, |x| x * x, |x, _| x + x)
    }

    pub fn abs(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("abs", a, |x| x.abs(), |x, _| sign(x))
    }

    pub fn sin(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("sin", a, |x| x.sin(), |x, _| x.cos())
    }

    pub fn cos(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("cos", a, |x| x.cos(), |x, _| -x.sin())
    }

    /// `x^p` for `x >= 0`. The derivative at `x = 0` is taken as zero when `p < 1`.
    pub fn powf(&mut self, a: &Var<T>, p: f64) -> Result<Var<T>> {
        if a.value().data().iter().any(|&v| v < T::zero()) {
            return Err(crate::Error::Invalid("powf of a negative value".into()));
        }
        let pt = T::c(p);
        self.unary("powf", a, move |x| x.powf(pt), move |x, _| {
            if x == T::zero() {
                if p >= 1.0 {
                    if p == 1.0 { T::one() } else { T::zero() }
                } else {
                    T::zero()
                }
            } else {
                pt * x.powf(pt - T::one())
            }
        })
    }

    /// Anti-wrapping distance `|x - 2π·round(x / 2π)|`, in `[0, π]`.
    pub fn wrap_abs(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("wrap_abs", a, |x| wrap_to_pi(x).abs(), |x, _| sign(wrap_to_pi(x)))
    }

    /// Two-argument arctangent in `(-π, π]`; `atan2(0, 0) = 0` with zero gradient.
    pub fn atan2(&mut self, y: &Var<T>, x: &Var<T>) -> Result<Var<T>> {
        if y.shape() != x.shape() {
            return shape_err("atan2", format!("{:?} vs {:?}", y.shape(), x.shape()));
        }
        let value = Array::from_parts(
            y.shape().to_vec(),
            par::zip_map_slice(y.value().data(), x.value().data(), atan2_wrapped),
        );
        self.record("atan2", value, &[y, x], |ctx: &BackwardCtx<'_, T>| {
            let (ys, xs, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut gy = vec![T::zero(); g.len()];
            let mut gx = vec![T::zero(); g.len()];
            for i in 0..g.len() {
                let r2 = xs[i] * xs[i] + ys[i] * ys[i];
                if r2 > T::zero() {
                    gy[i] = g[i] * xs[i] / r2;
                    gx[i] = -g[i] * ys[i] / r2;
                }
            }
            let shape = ctx.grad.shape().to_vec();
            Ok(vec![Some(Array::from_parts(shape.clone(), gy)), Some(Array::from_parts(shape, gx))])
        })
    }

    pub fn sum(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let value = Array::scalar(a.value().sum());
        self.record("sum", value, &[a], |ctx: &BackwardCtx<'_, T>| {
            Ok(vec![Some(Array::full(ctx.inputs[0].shape(), ctx.grad.item()))])
        })
    }

    pub fn mean(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let n = T::c(a.value().len() as f64);
        let value = Array::scalar(a.value().sum() / n);
        self.record("mean", value, &[a], move |ctx: &BackwardCtx<'_, T>| {
            Ok(vec![Some(Array::full(ctx.inputs[0].shape(), ctx.grad.item() / n))])
        })
    }

    /// Row-major reshape; element order is untouched.
    pub fn reshape(&mut self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let value = a.value().clone().reshaped(shape)?;
        self.record("reshape", value, &[a], |ctx: &BackwardCtx<'_, T>| {
            Ok(vec![Some(ctx.grad.clone().reshaped(ctx.inputs[0].shape())?)])
        })
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: &Var<T>, perm: &[usize]) -> Result<Var<T>> {
        let rank = a.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("{perm:?} is not a permutation of rank {rank}"));
        }
        let value = permute_array(a.value(), perm);
        let mut inv = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.record("permute", value, &[a], move |ctx: &BackwardCtx<'_, T>| {
            Ok(vec![Some(permute_array(ctx.grad, &inv))])
        })
    }

    pub fn concat(&mut self, parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let Some(first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        check_axis("concat", first.shape(), axis)?;
        for p in parts {
            let ok = p.shape().len() == first.shape().len()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return shape_err("concat", format!("{:?} vs {:?} on axis {axis}", p.shape(), first.shape()));
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.value().data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let value = Array::from_parts(shape, out);
        self.record("concat", value, parts, move |ctx: &BackwardCtx<'_, T>| {
            let g = ctx.grad.data();
            let mut res = Vec::with_capacity(lens.len());
            let mut off = 0;
            for (k, &l) in lens.iter().enumerate() {
                if !ctx.needs[k] {
                    res.push(None);
                    off += l;
                    continue;
                }
                let mut d = Vec::with_capacity(outer * l * inner);
                for o in 0..outer {
                    let base = (o * total + off) * inner;
                    d.extend_from_slice(&g[base..base + l * inner]);
                }
                res.push(Some(Array::from_parts(ctx.inputs[k].shape().to_vec(), d)));
                off += l;
            }
            Ok(res)
        })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        check_axis("slice", a.shape(), axis)?;
        let (outer, n, inner) = axis_split(a.shape(), axis);
        if len == 0 || start + len > n {
            return shape_err("slice", format!("[{start}, {}) out of range {n}", start + len));
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let src = a.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let value = Array::from_parts(shape, out);
        self.record("slice", value, &[a], move |ctx: &BackwardCtx<'_, T>| {
            let mut d = vec![T::zero(); outer * n * inner];
            let g = ctx.grad.data();
            for o in 0..outer {
                let base = (o * n + start) * inner;
                d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            Ok(vec![Some(Array::from_parts(ctx.inputs[0].shape().to_vec(), d))])
        })
    }

    /// Reverses one axis.
    pub fn flip(&mut self, a: &Var<T>, axis: usize) -> Result<Var<T>> {
        check_axis("flip", a.shape(), axis)?;
        let value = flip_array(a.value(), axis);
        self.record("flip", value, &[a], move |ctx: &BackwardCtx<'_, T>| {
            Ok(vec![Some(flip_array(ctx.grad, axis))])
        })
    }

    /// Zero padding of one axis.
    pub fn pad(&mut self, a: &Var<T>, axis: usize, before: usize, after: usize) -> Result<Var<T>> {
        check_axis("pad", a.shape(), axis)?;
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let m = n + before + after;
        let mut shape = a.shape().to_vec();
        shape[axis] = m;
        let mut out = vec![T::zero(); outer * m * inner];
        let src = a.value().data();
        for o in 0..outer {
            let dst = (o * m + before) * inner;
            out[dst..dst + n * inner].copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
        }
        let value = Array::from_parts(shape, out);
        self.record("pad", value, &[a], move |ctx: &BackwardCtx<'_, T>| {
            let g = ctx.grad.data();
            let mut d = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                let base = (o * m + before) * inner;
                d.extend_from_slice(&g[base..base + n * inner]);
            }
            Ok(vec![Some(Array::from_parts(ctx.inputs[0].shape().to_vec(), d))])
        })
    }

    /// `y = x·Wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let (xs, ws) = (x.shape(), w.shape());
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[1] {
            return shape_err("linear", format!("x {xs:?} with weight {ws:?}"));
        }
        let (d_out, d_in) = (ws[0], ws[1]);
        if let Some(b) = b {
            if b.shape() != [d_out] {
                return shape_err("linear", format!("bias {:?} for {d_out} outputs", b.shape()));
            }
        }
        let rows = x.value().len() / d_in;
        let mut out = vec![T::zero(); rows * d_out];
        if let Some(b) = b {
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(b.value().data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        row_parallel_gemm(d_out, d_in, x.value().data(), w.value().data(), true, beta, &mut out);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = d_out;
        let value = Array::from_parts(shape, out);
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        self.record("linear", value, &inputs, move |ctx: &BackwardCtx<'_, T>| {
            let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let gx = ctx.needs[0].then(|| {
                let mut d = vec![T::zero(); rows * d_in];
                row_parallel_gemm(d_in, d_out, g, wv, false, T::zero(), &mut d);
                Array::from_parts(ctx.inputs[0].shape().to_vec(), d)
            });
            let gw = ctx.needs[1].then(|| {
                let mut d = vec![T::zero(); d_out * d_in];
                gemm(true, false, d_out, d_in, rows, T::one(), g, xv, T::zero(), &mut d);
                Array::from_parts(vec![d_out, d_in], d)
            });
            let mut res = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs[2].then(|| {
                    let mut d = vec![T::zero(); d_out];
                    for row in g.chunks(d_out) {
                        for (o, v) in d.iter_mut().zip(row) {
                            *o += *v;
                        }
                    }
                    Array::from_parts(vec![d_out], d)
                }));
            }
            Ok(res)
        })
    }

    /// Batched matrix product over leading axes: `[.., m, k]·[.., k, n]`, or with
    /// `trans_b` a right operand stored as `[.., n, k]`.
    pub fn bmm(&mut self, a: &Var<T>, b: &Var<T>, trans_b: bool) -> Result<Var<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return shape_err("bmm", format!("{sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return shape_err("bmm", format!("inner extents {k} vs {kb}"));
        }
        let batch = numel(&sa[..r - 2]);
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (a.value().data(), b.value().data());
        par::for_each_chunk_mut(&mut out, m * n, |i, c| {
            gemm(false, trans_b, m, n, k, T::one(), &av[i * m * k..], &bv[i * k * n..], T::zero(), c);
        });
        let value = Array::from_parts(shape, out);
        self.record("bmm", value, &[a, b], move |ctx: &BackwardCtx<'_, T>| {
            let (av, bv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let ga = ctx.needs[0].then(|| {
                let mut d = vec![T::zero(); batch * m * k];
                // ga = g·Bᵀ, with B stored [k,n] (or [n,k] when trans_b)
                par::for_each_chunk_mut(&mut d, m * k, |i, c| {
                    gemm(false, !trans_b, m, k, n, T::one(), &g[i * m * n..], &bv[i * k * n..], T::zero(), c);
                });
                Array::from_parts(ctx.inputs[0].shape().to_vec(), d)
            });
            let gb = ctx.needs[1].then(|| {
                let mut d = vec![T::zero(); batch * k * n];
                par::for_each_chunk_mut(&mut d, k * n, |i, c| {
                    if trans_b {
                        // gB[n,k] = gᵀ·A
                        gemm(true, false, n, k, m, T::one(), &g[i * m * n..], &av[i * m * k..], T::zero(), c);
                    } else {
                        gemm(true, false, k, n, m, T::one(), &av[i * m * k..], &g[i * m * n..], T::zero(), c);
                    }
                });
                Array::from_parts(ctx.inputs[1].shape().to_vec(), d)
            });
            Ok(vec![ga, gb])
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let d = *a.shape().last().ok_or_else(|| crate::Error::Invalid("softmax of a scalar".into()))?;
        let mut out = a.value().data().to_vec();
        let rows = row_chunk(d);
        par::for_each_chunk_mut(&mut out, rows, |_, c| {
            for row in c.chunks_mut(d) {
                let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).fast_exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        });
        let value = Array::from_parts(a.shape().to_vec(), out);
        self.record("softmax", value, &[a], move |ctx: &BackwardCtx<'_, T>| {
            let (y, g) = (ctx.output.data(), ctx.grad.data());
            let mut gx = vec![T::zero(); y.len()];
            let rows = row_chunk(d);
            par::for_each_chunk_mut(&mut gx, rows, |ci, c| {
                let base = ci * rows;
                for (r, row) in c.chunks_mut(d).enumerate() {
                    let o = base + r * d;
                    let dot: T = (0..d).map(|j| y[o + j] * g[o + j]).sum();
                    for j in 0..d {
                        row[j] = y[o + j] * (g[o + j] - dot);
                    }
                }
            });
            Ok(vec![Some(Array::from_parts(ctx.grad.shape().to_vec(), gx))])
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
            return shape_err("layer_norm", format!("x {:?}, gamma {:?}", x.shape(), gamma.shape()));
        }
        let eps = T::c(eps);
        let (xv, gv, bv) = (x.value().data(), gamma.value().data(), beta.value().data());
        let mut out = vec![T::zero(); xv.len()];
        let rows = row_chunk(d);
        par::for_each_chunk_mut(&mut out, rows, |ci, c| {
            for (r, row) in c.chunks_mut(d).enumerate() {
                let o = ci * rows + r * d;
                let (mu, inv) = moments(&xv[o..o + d], eps);
                for j in 0..d {
                    row[j] = (xv[o + j] - mu) * inv * gv[j] + bv[j];
                }
            }
        });
        let value = Array::from_parts(x.shape().to_vec(), out);
        self.record("layer_norm", value, &[x, gamma, beta], move |ctx: &BackwardCtx<'_, T>| {
            let (xv, gv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let n_rows = xv.len() / d;
            let mut gx = vec![T::zero(); xv.len()];
            let mut ggam = vec![T::zero(); d];
            let mut gbet = vec![T::zero(); d];
            let dt = T::c(d as f64);
            for r in 0..n_rows {
                let o = r * d;
                let (mu, inv) = moments(&xv[o..o + d], eps);
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for j in 0..d {
                    let xh = (xv[o + j] - mu) * inv;
                    let gh = g[o + j] * gv[j];
                    ggam[j] += g[o + j] * xh;
                    gbet[j] += g[o + j];
                    m1 += gh;
                    m2 += gh * xh;
                }
                m1 /= dt;
                m2 /= dt;
                for j in 0..d {
                    let xh = (xv[o + j] - mu) * inv;
                    gx[o + j] = inv * (g[o + j] * gv[j] - m1 - xh * m2);
                }
            }
            Ok(vec![
                Some(Array::from_parts(ctx.inputs[0].shape().to_vec(), gx)),
                Some(Array::from_parts(vec![d], ggam)),
                Some(Array::from_parts(vec![d], gbet)),
            ])
        })
    }

    /// RMS normalization over the last axis: `gamma · x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: &Var<T>, gamma: &Var<T>, eps: f64) -> Result<Var<T>> {
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 || gamma.shape() != [d] {
            return shape_err("rms_norm", format!("x {:?}, gamma {:?}", x.shape(), gamma.shape()));
        }
        let eps = T::c(eps);
        let dt = T::c(d as f64);
        let (xv, gv) = (x.value().data(), gamma.value().data());
        let mut out = vec![T::zero(); xv.len()];
        let rows = row_chunk(d);
        par::for_each_chunk_mut(&mut out, rows, |ci, c| {
            for (r, row) in c.chunks_mut(d).enumerate() {
                let o = ci * rows + r * d;
                let ms: T = xv[o..o + d].iter().map(|v| *v * *v).sum::<T>() / dt;
                let inv = (ms + eps).sqrt().recip();
                for j in 0..d {
                    row[j] = xv[o + j] * inv * gv[j];
                }
            }
        });
        let value = Array::from_parts(x.shape().to_vec(), out);
        self.record("rms_norm", value, &[x, gamma], move |ctx: &BackwardCtx<'_, T>| {
            let (xv, gv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut gx = vec![T::zero(); xv.len()];
            let mut ggam = vec![T::zero(); d];
            for r in 0..xv.len() / d {
                let o = r * d;
                let ms: T = xv[o..o + d].iter().map(|v| *v * *v).sum::<T>() / dt;
                let inv = (ms + eps).sqrt().recip();
                let mut m = T::zero();
                for j in 0..d {
                    let xh = xv[o + j] * inv;
                    ggam[j] += g[o + j] * xh;
                    m += g[o + j] * gv[j] * xh;
                }
                m /= dt;
                for j in 0..d {
                    let xh = xv[o + j] * inv;
                    gx[o + j] = inv * (g[o + j] * gv[j] - xh * m);
                }
            }
            Ok(vec![
                Some(Array::from_parts(ctx.inputs[0].shape().to_vec(), gx)),
                Some(Array::from_parts(vec![d], ggam)),
            ])
        })
    }
}

fn row_chunk(d: usize) -> usize {
    (par::MIN_PARALLEL_LEN / 8 / d).max(1) * d
}

/// Mean and `1/sqrt(var + eps)` of a row (biased variance).
pub(crate) fn moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::c(row.len() as f64);
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
    (mu, (var + eps).sqrt().recip())
}

/// Row-chunked `out[rows×n] = x[rows×k]·op(w) + beta·out`; `w` is `[n,k]` when `wt`, else `[k,n]`.
#[allow(clippy::too_many_arguments)]
fn row_parallel_gemm<T: Real>(n: usize, k: usize, x: &[T], w: &[T], wt: bool, beta: T, out: &mut [T]) {
    let block = (par::MIN_PARALLEL_LEN / n.max(1)).clamp(64, 4096);
    par::for_each_chunk_mut(out, block * n, |ci, c| {
        let r0 = ci * block;
        let m = c.len() / n;
        gemm(false, wt, m, n, k, T::one(), &x[r0 * k..(r0 + m) * k], w, beta, c);
    });
}

pub(crate) fn permute_array<T: Real>(a: &Array<T>, perm: &[usize]) -> Array<T> {
    let shape = a.shape();
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let s: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n = a.len();
    let src = a.data();
    let mut out = vec![T::zero(); n];
    let rank = shape.len();
    if rank == 0 {
        return a.clone();
    }
    let last = out_shape[rank - 1];
    let s_last = s[rank - 1];
    let rows = n / last;
    let chunk_rows = (par::MIN_PARALLEL_LEN / last).max(1);
    par::for_each_chunk_mut(&mut out, chunk_rows * last, |ci, c| {
        let mut idx = vec![0usize; rank - 1];
        let mut r = ci * chunk_rows;
        // decompose starting row index
        let mut rem = r;
        for ax in (0..rank - 1).rev() {
            idx[ax] = rem % out_shape[ax];
            rem /= out_shape[ax];
        }
        for row in c.chunks_mut(last) {
            let base: usize = idx.iter().zip(&s).map(|(i, st)| i * st).sum();
            for (j, v) in row.iter_mut().enumerate() {
                *v = src[base + j * s_last];
            }
            r += 1;
            if r < rows {
                for ax in (0..rank - 1).rev() {
                    idx[ax] += 1;
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
        }
    });
    Array::from_parts(out_shape, out)
}

pub(crate) fn flip_array<T: Real>(a: &Array<T>, axis: usize) -> Array<T> {
    let (outer, n, inner) = axis_split(a.shape(), axis);
    let src = a.data();
    let mut out = Vec::with_capacity(src.len());
    for o in 0..outer {
        for i in (0..n).rev() {
            let base = (o * n + i) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
    }
    Array::from_parts(a.shape().to_vec(), out)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    // exp(−x) may overflow to infinity for very negative x; the result is then 0.
    (T::one() + (-x).fast_exp()).recip()
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::c(20.0) {
        x
    } else {
        x.fast_exp().ln_1p()
    }
}

#[inline]
fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Maps an angle difference to `(-π, π]`.
#[inline]
pub fn wrap_to_pi<T: Real>(x: T) -> T {
    let two_pi = T::c(2.0 * std::f64::consts::PI);
    x - two_pi * (x / two_pi).round()
}

#[inline]
pub fn atan2_wrapped<T: Real>(y: T, x: T) -> T {
    if y == T::zero() && x == T::zero() {
        return T::zero();
    }
    let p = y.atan2(x);
    if p <= -T::c(std::f64::consts::PI) {
        T::c(std::f64::consts::PI)
    } else {
        p
    }
}
