//! 2-D convolution kernels (plain, transposed and deformable) as graph operations.
//!
//! All three lower to the same column layout: `cols[(c·kh + i)·kw + j, p]` holds the
//! input sample seen by tap `(i, j)` of channel `c` at output position `p`. Each
//! channel group then becomes one GEMM against the weight matrix.

use crate::error::{shape_err, Error, Result};
use crate::par;
use crate::tensor::{gemm, Array, BackwardCtx, Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `(kT, kF)`.
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
    pub transposed: bool,
    pub bias: bool,
}

impl Conv2dSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: (usize, usize)) -> Self {
        Self { in_ch, out_ch, kernel, stride: (1, 1), dilation: (1, 1), groups: 1, transposed: false, bias: true }
    }

    pub fn stride(mut self, s: (usize, usize)) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: (usize, usize)) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let Self { in_ch, out_ch, kernel, stride, dilation, groups, .. } = *self;
        let positive = [in_ch, out_ch, groups, kernel.0, kernel.1, stride.0, stride.1, dilation.0, dilation.1];
        if positive.contains(&0) {
            return Err(Error::Invalid(format!("conv spec with zero extent: {self:?}")));
        }
        if in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(Error::Invalid(format!("channels {in_ch}->{out_ch} not divisible by {groups} groups")));
        }
        Ok(())
    }

    /// Symmetric zero padding per side; odd kernels keep the extent at stride 1.
    pub fn padding(&self) -> (usize, usize) {
        (self.dilation.0 * (self.kernel.0 - 1) / 2, self.dilation.1 * (self.kernel.1 - 1) / 2)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let (kh, kw) = self.kernel;
        if self.transposed {
            [self.in_ch, self.out_ch / self.groups, kh, kw]
        } else {
            [self.out_ch, self.in_ch / self.groups, kh, kw]
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_ch } else { 0 }
    }

    /// Output `(T, F)` for an input of `(h, w)`. Transposed convs use an output
    /// padding of `stride − 1`, so they exactly invert the strided conv's shape.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let one = |n: usize, k: usize, s: usize, d: usize, p: usize| -> Option<usize> {
            let span = d * (k - 1) + 1;
            if self.transposed {
                ((n - 1) * s + span + (s - 1)).checked_sub(2 * p)
            } else {
                (n + 2 * p).checked_sub(span).map(|r| r / s + 1)
            }
            .filter(|v| *v > 0)
        };
        let (ph, pw) = self.padding();
        match (
            one(h, self.kernel.0, self.stride.0, self.dilation.0, ph),
            one(w, self.kernel.1, self.stride.1, self.dilation.1, pw),
        ) {
            (Some(a), Some(b)) if h > 0 && w > 0 => Ok((a, b)),
            _ => shape_err("conv2d", format!("non-positive output extent for input {h}x{w} with {self:?}")),
        }
    }

    /// Multiply-accumulates for one item producing an `(h_out, w_out)` map
    /// (for transposed convs, pass the input extents).
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (kh, kw) = self.kernel;
        let per = (self.in_ch / self.groups * kh * kw) as u64;
        per * (self.out_ch * h * w) as u64
    }

    fn geom(&self, c: usize, big: (usize, usize), small: (usize, usize)) -> Geom {
        let (ph, pw) = self.padding();
        Geom {
            c,
            h: big.0,
            w: big.1,
            kh: self.kernel.0,
            kw: self.kernel.1,
            sh: self.stride.0,
            sw: self.stride.1,
            dh: self.dilation.0,
            dw: self.dilation.1,
            ph,
            pw,
            oh: small.0,
            ow: small.1,
        }
    }
}

/// Sliding-window geometry between a "big" image `c×h×w` and a "small" grid `oh×ow`.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn cols_len(&self) -> usize {
        self.c * self.taps() * self.oh * self.ow
    }

    fn row_of(&self, i: usize, out_i: usize) -> Option<usize> {
        (out_i * self.sh + i * self.dh).checked_sub(self.ph).filter(|r| *r < self.h)
    }

    fn col_of(&self, j: usize, out_j: usize) -> Option<usize> {
        (out_j * self.sw + j * self.dw).checked_sub(self.pw).filter(|r| *r < self.w)
    }

    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let p = self.oh * self.ow;
        for c in 0..self.c {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * p..][..p];
                    for oi in 0..self.oh {
                        let dst = &mut row[oi * self.ow..(oi + 1) * self.ow];
                        let Some(r) = self.row_of(i, oi) else {
                            dst.fill(T::zero());
                            continue;
                        };
                        let src = &plane[r * self.w..(r + 1) * self.w];
                        for (oj, d) in dst.iter_mut().enumerate() {
                            *d = self.col_of(j, oj).map_or(T::zero(), |q| src[q]);
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col); accumulates into `img`.
    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let p = self.oh * self.ow;
        for c in 0..self.c {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * p..][..p];
                    for oi in 0..self.oh {
                        let Some(r) = self.row_of(i, oi) else { continue };
                        for oj in 0..self.ow {
                            if let Some(q) = self.col_of(j, oj) {
                                plane[r * self.w + q] += row[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Nominal (undeformed) sampling position of tap `(i, j)` at output `(oi, oj)`.
    fn nominal(&self, i: usize, j: usize, oi: usize, oj: usize) -> (f64, f64) {
        (
            (oi * self.sh + i * self.dh) as f64 - self.ph as f64,
            (oj * self.sw + j * self.dw) as f64 - self.pw as f64,
        )
    }

    /// Bilinear corners of a fractional position: `(index or None if outside, weight, ∂w/∂y, ∂w/∂x)`.
    fn corners(&self, y: f64, x: f64) -> [(Option<usize>, f64, f64, f64); 4] {
        let (y0, x0) = (y.floor(), x.floor());
        let (ly, lx) = (y - y0, x - x0);
        let at = |yy: f64, xx: f64| -> Option<usize> {
            (yy >= 0.0 && xx >= 0.0 && yy < self.h as f64 && xx < self.w as f64)
                .then(|| yy as usize * self.w + xx as usize)
        };
        [
            (at(y0, x0), (1.0 - ly) * (1.0 - lx), -(1.0 - lx), -(1.0 - ly)),
            (at(y0, x0 + 1.0), (1.0 - ly) * lx, -lx, 1.0 - ly),
            (at(y0 + 1.0, x0), ly * (1.0 - lx), 1.0 - lx, -ly),
            (at(y0 + 1.0, x0 + 1.0), ly * lx, lx, ly),
        ]
    }

    /// Column matrix with each tap displaced by `off[2k] (rows), off[2k+1] (cols)`.
    fn deform_im2col<T: Real>(&self, img: &[T], off: &[T], cols: &mut [T]) {
        let p = self.oh * self.ow;
        let taps = self.taps();
        for k in 0..taps {
            let (i, j) = (k / self.kw, k % self.kw);
            for oi in 0..self.oh {
                for oj in 0..self.ow {
                    let q = oi * self.ow + oj;
                    let (ny, nx) = self.nominal(i, j, oi, oj);
                    let y = ny + off[2 * k * p + q].f64();
                    let x = nx + off[(2 * k + 1) * p + q].f64();
                    let cs = self.corners(y, x);
                    for c in 0..self.c {
                        let plane = &img[c * self.h * self.w..];
                        let mut v = T::zero();
                        for &(idx, wgt, _, _) in &cs {
                            if let (Some(idx), true) = (idx, wgt != 0.0) {
                                v += plane[idx] * T::c(wgt);
                            }
                        }
                        cols[(c * taps + k) * p + q] = v;
                    }
                }
            }
        }
    }

    /// Adjoint of [`deform_im2col`](Self::deform_im2col) with respect to the image
    /// (accumulated into `gimg`) and the offsets (written to `goff`).
    fn deform_col2im<T: Real>(&self, img: &[T], off: &[T], gcols: &[T], gimg: &mut [T], goff: &mut [T]) {
        let p = self.oh * self.ow;
        let taps = self.taps();
        for k in 0..taps {
            let (i, j) = (k / self.kw, k % self.kw);
            for oi in 0..self.oh {
                for oj in 0..self.ow {
                    let q = oi * self.ow + oj;
                    let (ny, nx) = self.nominal(i, j, oi, oj);
                    let y = ny + off[2 * k * p + q].f64();
                    let x = nx + off[(2 * k + 1) * p + q].f64();
                    let cs = self.corners(y, x);
                    let (mut gy, mut gx) = (T::zero(), T::zero());
                    for c in 0..self.c {
                        let g = gcols[(c * taps + k) * p + q];
                        if g == T::zero() {
                            continue;
                        }
                        let base = c * self.h * self.w;
                        for &(idx, wgt, dy, dx) in &cs {
                            let Some(idx) = idx else { continue };
                            gimg[base + idx] += g * T::c(wgt);
                            let v = img[base + idx] * g;
                            gy += v * T::c(dy);
                            gx += v * T::c(dx);
                        }
                    }
                    goff[2 * k * p + q] = gy;
                    goff[(2 * k + 1) * p + q] = gx;
                }
            }
        }
    }
}

fn check_input(op: &'static str, x: &[usize], spec: &Conv2dSpec, w: &[usize], b: Option<&Var<impl Real>>) -> Result<()> {
    spec.validate()?;
    if x.len() != 4 || x[1] != spec.in_ch {
        return shape_err(op, format!("input {x:?} for {} input channels", spec.in_ch));
    }
    if w != spec.weight_shape() {
        return shape_err(op, format!("weight {w:?}, expected {:?}", spec.weight_shape()));
    }
    match b {
        Some(b) if !spec.bias || b.shape() != [spec.out_ch] => {
            shape_err(op, format!("bias {:?} for {} outputs", b.shape(), spec.out_ch))
        }
        None if spec.bias => shape_err(op, "missing bias"),
        _ => Ok(()),
    }
}

/// `out[o, p] = Σ W_g[o, r] cols_g[r, p]` for every group, plus bias.
fn grouped_forward<T: Real>(spec: &Conv2dSpec, w: &[T], bias: Option<&[T]>, cols: &[T], p: usize, out: &mut [T]) {
    let (g, og) = (spec.groups, spec.out_ch / spec.groups);
    let kg = spec.in_ch / g * spec.kernel.0 * spec.kernel.1;
    for gi in 0..g {
        let o = &mut out[gi * og * p..(gi + 1) * og * p];
        let beta = match bias {
            Some(b) => {
                for (r, row) in o.chunks_mut(p).enumerate() {
                    row.fill(b[gi * og + r]);
                }
                T::one()
            }
            None => T::zero(),
        };
        gemm(false, false, og, p, kg, T::one(), &w[gi * og * kg..], &cols[gi * kg * p..], beta, o);
    }
}

/// Weight gradient (accumulated) and column gradient of [`grouped_forward`].
fn grouped_backward<T: Real>(spec: &Conv2dSpec, w: &[T], cols: &[T], gout: &[T], p: usize, gw: &mut [T], gcols: Option<&mut [T]>) {
    let (g, og) = (spec.groups, spec.out_ch / spec.groups);
    let kg = spec.in_ch / g * spec.kernel.0 * spec.kernel.1;
    for gi in 0..g {
        let go = &gout[gi * og * p..];
        gemm(false, true, og, kg, p, T::one(), go, &cols[gi * kg * p..], T::one(), &mut gw[gi * og * kg..]);
    }
    if let Some(gc) = gcols {
        for gi in 0..g {
            let go = &gout[gi * og * p..];
            gemm(true, false, kg, p, og, T::one(), &w[gi * og * kg..], go, T::zero(), &mut gc[gi * kg * p..]);
        }
    }
}

fn bias_grad<T: Real>(gout: &[T], ch: usize, p: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); ch];
    for item in gout.chunks(ch * p) {
        for (o, row) in item.chunks(p).enumerate() {
            gb[o] += row.iter().copied().sum::<T>();
        }
    }
    gb
}

/// Sums per-item partial results in item order.
fn reduce_ordered<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
    acc
}

fn with_bias<'a, T: Real>(x: &'a Var<T>, w: &'a Var<T>, b: Option<&'a Var<T>>) -> Vec<&'a Var<T>> {
    let mut v = vec![x, w];
    v.extend(b);
    v
}

impl<T: Real> Graph<T> {
    /// Convolution of `x: [B, in, T, F]` with `w: [out, in/groups, kT, kF]`.
    pub fn conv2d(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, spec: Conv2dSpec) -> Result<Var<T>> {
        if spec.transposed {
            return self.conv_transpose2d(x, w, b, spec);
        }
        check_input("conv2d", x.shape(), &spec, w.shape(), b)?;
        let &[nb, ci, h, wd] = x.shape() else { unreachable!() };
        let (oh, ow) = spec.output_extent(h, wd)?;
        let geom = spec.geom(ci, (h, wd), (oh, ow));
        let p = oh * ow;
        let (xin, item_out) = (h * wd * ci, spec.out_ch * p);
        let (xv, wv) = (x.value().data(), w.value().data());
        let bv = b.map(|b| b.value().data());
        let mut out = vec![T::zero(); nb * item_out];
        par::for_each_chunk_mut(&mut out, item_out, |bi, o| {
            let mut cols = vec![T::zero(); geom.cols_len()];
            geom.im2col(&xv[bi * xin..(bi + 1) * xin], &mut cols);
            grouped_forward(&spec, wv, bv, &cols, p, o);
        });
        let value = Array::new(&[nb, spec.out_ch, oh, ow], out)?;
        self.record("conv2d", value, &with_bias(x, w, b), move |ctx: &BackwardCtx<'_, T>| {
            let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let wlen = wv.len();
            let parts: Vec<(Vec<T>, Vec<T>)> = par::map_indexed(nb, |bi| {
                let mut cols = vec![T::zero(); geom.cols_len()];
                geom.im2col(&xv[bi * xin..(bi + 1) * xin], &mut cols);
                let mut gw = vec![T::zero(); wlen];
                let mut gx = vec![T::zero(); if ctx.needs[0] { xin } else { 0 }];
                if ctx.needs[0] {
                    let mut gcols = vec![T::zero(); geom.cols_len()];
                    grouped_backward(&spec, wv, &cols, &g[bi * item_out..], p, &mut gw, Some(&mut gcols));
                    geom.col2im(&gcols, &mut gx);
                } else {
                    grouped_backward(&spec, wv, &cols, &g[bi * item_out..], p, &mut gw, None);
                }
                (gx, gw)
            });
            let (gxs, gws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
            let mut res = vec![
                ctx.needs[0].then(|| Array::from_parts(ctx.inputs[0].shape().to_vec(), gxs.concat())),
                Some(Array::from_parts(ctx.inputs[1].shape().to_vec(), reduce_ordered(gws, wlen))),
            ];
            if ctx.inputs.len() == 3 {
                res.push(Some(Array::from_parts(vec![spec.out_ch], bias_grad(g, spec.out_ch, p))));
            }
            Ok(res)
        })
    }

    /// Transposed convolution of `x: [B, in, T, F]` with `w: [in, out/groups, kT, kF]`.
    pub fn conv_transpose2d(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, spec: Conv2dSpec) -> Result<Var<T>> {
        let spec = Conv2dSpec { transposed: true, ..spec };
        check_input("conv_transpose2d", x.shape(), &spec, w.shape(), b)?;
        let &[nb, ci, h, wd] = x.shape() else { unreachable!() };
        let (oh, ow) = spec.output_extent(h, wd)?;
        let co = spec.out_ch;
        let geom = spec.geom(co, (oh, ow), (h, wd));
        let p = h * wd;
        let (g, cig) = (spec.groups, ci / spec.groups);
        let kg = co / g * geom.taps();
        let (xin, item_out) = (ci * p, co * oh * ow);
        let (xv, wv) = (x.value().data(), w.value().data());
        let bv = b.map(|b| b.value().data().to_vec());
        let mut out = vec![T::zero(); nb * item_out];
        par::for_each_chunk_mut(&mut out, item_out, |bi, o| {
            let mut cols = vec![T::zero(); geom.cols_len()];
            let xi = &xv[bi * xin..];
            for gi in 0..g {
                let (wg, xg) = (&wv[gi * cig * kg..], &xi[gi * cig * p..]);
                gemm(true, false, kg, p, cig, T::one(), wg, xg, T::zero(), &mut cols[gi * kg * p..]);
            }
            geom.col2im(&cols, o);
            if let Some(bv) = &bv {
                for (c, plane) in o.chunks_mut(oh * ow).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        });
        let value = Array::new(&[nb, co, oh, ow], out)?;
        self.record("conv_transpose2d", value, &with_bias(x, w, b), move |ctx: &BackwardCtx<'_, T>| {
            let (xv, wv, gv) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let wlen = wv.len();
            let parts: Vec<(Vec<T>, Vec<T>)> = par::map_indexed(nb, |bi| {
                let mut gcols = vec![T::zero(); geom.cols_len()];
                geom.im2col(&gv[bi * item_out..(bi + 1) * item_out], &mut gcols);
                let xi = &xv[bi * xin..];
                let mut gw = vec![T::zero(); wlen];
                let mut gx = vec![T::zero(); if ctx.needs[0] { xin } else { 0 }];
                for gi in 0..g {
                    let gc = &gcols[gi * kg * p..];
                    gemm(false, true, cig, kg, p, T::one(), &xi[gi * cig * p..], gc, T::zero(), &mut gw[gi * cig * kg..]);
                    if ctx.needs[0] {
                        gemm(false, false, cig, p, kg, T::one(), &wv[gi * cig * kg..], gc, T::zero(), &mut gx[gi * cig * p..]);
                    }
                }
                (gx, gw)
            });
            let (gxs, gws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
            let mut res = vec![
                ctx.needs[0].then(|| Array::from_parts(ctx.inputs[0].shape().to_vec(), gxs.concat())),
                Some(Array::from_parts(ctx.inputs[1].shape().to_vec(), reduce_ordered(gws, wlen))),
            ];
            if ctx.inputs.len() == 3 {
                res.push(Some(Array::from_parts(vec![co], bias_grad(gv, co, oh * ow))));
            }
            Ok(res)
        })
    }

    /// Deformable convolution: tap `k` at output `p` samples `x` bilinearly at its
    /// nominal position displaced by `offsets[:, 2k, p]` (time) and
    /// `offsets[:, 2k+1, p]` (frequency). Samples outside the map read as zero.
    pub fn deform_conv2d(
        &mut self,
        x: &Var<T>,
        offsets: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        spec: Conv2dSpec,
    ) -> Result<Var<T>> {
        if spec.transposed {
            return Err(Error::Invalid("deformable convolution cannot be transposed".into()));
        }
        check_input("deform_conv2d", x.shape(), &spec, w.shape(), b)?;
        let &[nb, ci, h, wd] = x.shape() else { unreachable!() };
        let (oh, ow) = spec.output_extent(h, wd)?;
        let geom = spec.geom(ci, (h, wd), (oh, ow));
        let p = oh * ow;
        let off_shape = [nb, 2 * geom.taps(), oh, ow];
        if offsets.shape() != off_shape {
            return shape_err("deform_conv2d", format!("offsets {:?}, expected {off_shape:?}", offsets.shape()));
        }
        let (xin, oin, item_out) = (ci * h * wd, 2 * geom.taps() * p, spec.out_ch * p);
        let (xv, ov, wv) = (x.value().data(), offsets.value().data(), w.value().data());
        let bv = b.map(|b| b.value().data());
        let mut out = vec![T::zero(); nb * item_out];
        par::for_each_chunk_mut(&mut out, item_out, |bi, o| {
            let mut cols = vec![T::zero(); geom.cols_len()];
            geom.deform_im2col(&xv[bi * xin..(bi + 1) * xin], &ov[bi * oin..(bi + 1) * oin], &mut cols);
            grouped_forward(&spec, wv, bv, &cols, p, o);
        });
        let value = Array::new(&[nb, spec.out_ch, oh, ow], out)?;
        let mut inputs = vec![x, offsets, w];
        inputs.extend(b);
        self.record("deform_conv2d", value, &inputs, move |ctx: &BackwardCtx<'_, T>| {
            let (xv, ov, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data(), ctx.grad.data());
            let wlen = wv.len();
            let need_cols = ctx.needs[0] || ctx.needs[1];
            let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = par::map_indexed(nb, |bi| {
                let (xi, oi) = (&xv[bi * xin..(bi + 1) * xin], &ov[bi * oin..(bi + 1) * oin]);
                let mut cols = vec![T::zero(); geom.cols_len()];
                geom.deform_im2col(xi, oi, &mut cols);
                let mut gw = vec![T::zero(); wlen];
                let mut gx = vec![T::zero(); xin];
                let mut go = vec![T::zero(); oin];
                if need_cols {
                    let mut gcols = vec![T::zero(); geom.cols_len()];
                    grouped_backward(&spec, wv, &cols, &g[bi * item_out..], p, &mut gw, Some(&mut gcols));
                    geom.deform_col2im(xi, oi, &gcols, &mut gx, &mut go);
                } else {
                    grouped_backward(&spec, wv, &cols, &g[bi * item_out..], p, &mut gw, None);
                }
                (gx, go, gw)
            });
            let mut gxs = Vec::with_capacity(nb * xin);
            let mut gos = Vec::with_capacity(nb * oin);
            let mut gws = Vec::with_capacity(nb);
            for (gx, go, gw) in parts {
                gxs.extend(gx);
                gos.extend(go);
                gws.push(gw);
            }
            let mut res = vec![
                ctx.needs[0].then(|| Array::from_parts(ctx.inputs[0].shape().to_vec(), gxs)),
                ctx.needs[1].then(|| Array::from_parts(ctx.inputs[1].shape().to_vec(), gos)),
                Some(Array::from_parts(ctx.inputs[2].shape().to_vec(), reduce_ordered(gws, wlen))),
            ];
            if ctx.inputs.len() == 4 {
                res.push(Some(Array::from_parts(vec![spec.out_ch], bias_grad(g, spec.out_ch, p))));
            }
            Ok(res)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extents() {
        let down = Conv2dSpec::new(16, 32, (3, 3)).stride((2, 2));
        assert_eq!(down.output_extent(256, 128).unwrap(), (128, 64));
        let up = Conv2dSpec::new(32, 16, (3, 3)).stride((2, 2)).transposed();
        assert_eq!(up.output_extent(128, 64).unwrap(), (256, 128));
        let enc = Conv2dSpec::new(16, 16, (1, 3)).stride((1, 2));
        assert_eq!(enc.output_extent(256, 256).unwrap(), (256, 128));
        let t = Conv2dSpec::new(4, 4, (1, 3)).stride((1, 2)).transposed();
        assert_eq!(t.output_extent(8, 8).unwrap(), (8, 16));
        // Same padding keeps a 1x1 input alive; an even dilated kernel does not fit.
        assert_eq!(Conv2dSpec::new(1, 1, (5, 5)).stride((2, 2)).dilation((3, 3)).output_extent(1, 1).unwrap(), (1, 1));
        assert!(Conv2dSpec::new(1, 1, (4, 4)).dilation((3, 3)).output_extent(1, 1).is_err());
        assert!(down.output_extent(0, 8).is_err());
    }

    #[test]
    fn validation() {
        assert!(Conv2dSpec::new(6, 4, (3, 3)).groups(4).validate().is_err());
        assert!(Conv2dSpec::new(4, 4, (0, 3)).validate().is_err());
        assert_eq!(Conv2dSpec::new(4, 8, (3, 3)).groups(2).param_count(), 8 * 2 * 9 + 8);
    }
}
