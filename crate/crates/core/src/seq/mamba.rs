//! Mamba units and the bidirectional wrapper used along time and frequency.

use crate::error::{shape_err, Result};
use crate::nn::{fan_in_bound, FlopKind, FlopsReport, Init, ParamBuilder};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MambaConfig {
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self { d_state: 16, d_conv: 4, expand: 3 }
    }
}

impl MambaConfig {
    pub fn inner(&self, d_model: usize) -> usize {
        self.expand * d_model
    }

    /// Rank of the step-size projection.
    pub fn dt_rank(d_model: usize) -> usize {
        d_model.div_ceil(16)
    }

    /// Parameters of one [`MambaUnit`] at width `d`.
    pub fn unit_params(&self, d: usize) -> usize {
        let (di, n, r, k) = (self.inner(d), self.d_state, Self::dt_rank(d), self.d_conv);
        d + 2 * di * d + di * k + di + (r + 2 * n) * di + r * di + di + di * n + di + d * di
    }
}

pub const RMS_NORM_EPS: f64 = 1e-5;
const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 0.1;
const DT_INIT_FLOOR: f64 = 1e-4;

/// Pre-norm residual Mamba layer over `[batch, len, d]`:
/// `x + out_proj(ssm(silu(conv(in_x))) ⊙ silu(z))` with `[in_x, z] = in_proj(rms_norm(x))`.
#[derive(Clone, Debug)]
pub struct MambaUnit {
    pub d_model: usize,
    pub cfg: MambaConfig,
    pub norm: ParamId,
    pub in_proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_proj: ParamId,
    pub dt_w: ParamId,
    pub dt_b: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: ParamId,
}

fn dt_bias(i: usize) -> f64 {
    // Deterministic log-spaced step sizes in [DT_MIN, DT_MAX], stored as softplus⁻¹.
    let frac = ((i as f64 * 0.618_033_988_749_895) % 1.0).abs();
    let dt = (DT_MIN.ln() + frac * (DT_MAX.ln() - DT_MIN.ln())).exp().max(DT_INIT_FLOOR);
    dt + (-(-dt).exp_m1()).ln()
}

impl MambaUnit {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, d: usize, cfg: MambaConfig) -> Result<Self> {
        let (di, n, r, k) = (cfg.inner(d), cfg.d_state, MambaConfig::dt_rank(d), cfg.d_conv);
        let n_state = n;
        Ok(Self {
            d_model: d,
            cfg,
            norm: pb.param("norm.weight", &[d], Init::Const(1.0))?,
            in_proj: pb.param("in_proj.weight", &[2 * di, d], Init::Uniform(fan_in_bound(d)))?,
            conv_w: pb.param("conv1d.weight", &[di, k], Init::Uniform(fan_in_bound(k)))?,
            conv_b: pb.param("conv1d.bias", &[di], Init::Uniform(fan_in_bound(k)))?,
            x_proj: pb.param("x_proj.weight", &[r + 2 * n, di], Init::Uniform(fan_in_bound(di)))?,
            dt_w: pb.param("dt_proj.weight", &[di, r], Init::Uniform(1.0 / (r as f64).sqrt()))?,
            dt_b: pb.param("dt_proj.bias", &[di], Init::Fn(dt_bias))?,
            a_log: {
                let id = pb.param("A_log", &[di, n], Init::Zeros)?;
                let v = pb.store().value_mut(id);
                for (i, a) in v.data_mut().iter_mut().enumerate() {
                    *a = T::c(((i % n_state) + 1) as f64).ln();
                }
                id
            },
            d_skip: pb.param("D", &[di], Init::Const(1.0))?,
            out_proj: pb.param("out_proj.weight", &[d, di], Init::Uniform(fan_in_bound(di)))?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.cfg.unit_params(self.d_model)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let d = self.d_model;
        let &[batch, len, dx] = x.shape() else {
            return shape_err("mamba", format!("expected [batch, len, {d}], got {:?}", x.shape()));
        };
        if dx != d {
            return shape_err("mamba", format!("width {dx} for a {d}-wide unit"));
        }
        let (di, n, r) = (self.cfg.inner(d), self.cfg.d_state, MambaConfig::dt_rank(d));
        let p = |g: &mut Graph<T>, id| g.param(ps, id);
        let norm = p(g, self.norm);
        let h = g.rms_norm(x, &norm, RMS_NORM_EPS)?;
        let w_in = p(g, self.in_proj);
        let xz = g.linear(&h, &w_in, None)?;
        let xin = g.slice(&xz, 2, 0, di)?;
        let z = g.slice(&xz, 2, di, di)?;
        let (cw, cb) = (p(g, self.conv_w), p(g, self.conv_b));
        let xc = g.causal_conv1d(&xin, &cw, &cb)?;
        let xc = g.silu(&xc)?;
        let w_x = p(g, self.x_proj);
        let dbc = g.linear(&xc, &w_x, None)?;
        let dt_low = g.slice(&dbc, 2, 0, r)?;
        let bmat = g.slice(&dbc, 2, r, n)?;
        let cmat = g.slice(&dbc, 2, r + n, n)?;
        let (dtw, dtb) = (p(g, self.dt_w), p(g, self.dt_b));
        let dt = g.linear(&dt_low, &dtw, Some(&dtb))?;
        let dt = g.softplus(&dt)?;
        let alog = p(g, self.a_log);
        let a = g.exp(&alog)?;
        let a = g.neg(&a)?;
        let dsk = p(g, self.d_skip);
        let y = g.selective_scan(&xc, &dt, &a, &bmat, &cmat, &dsk)?;
        let gate = g.silu(&z)?;
        let y = g.mul(&y, &gate)?;
        let w_out = p(g, self.out_proj);
        let out = g.linear(&y, &w_out, None)?;
        debug_assert_eq!(out.shape(), [batch, len, d]);
        g.add(x, &out)
    }

    /// FLOPs of one pass over `batch` sequences of length `len`.
    pub fn flops(&self, name: &str, batch: usize, len: usize, rep: &mut FlopsReport) {
        let d = self.d_model;
        let (di, n, r, k) = (self.cfg.inner(d), self.cfg.d_state, MambaConfig::dt_rank(d), self.cfg.d_conv);
        let tokens = (batch * len) as u64;
        let (d, di, n, r, k) = (d as u64, di as u64, n as u64, r as u64, k as u64);
        rep.elementwise(&format!("{name}.norm"), FlopKind::Norm, tokens * d, 4);
        rep.macs(&format!("{name}.in_proj"), FlopKind::Linear, tokens * d * 2 * di);
        rep.macs(&format!("{name}.conv1d"), FlopKind::Conv, tokens * di * k);
        rep.elementwise(&format!("{name}.silu"), FlopKind::Activation, tokens * di, 2);
        rep.macs(&format!("{name}.x_proj"), FlopKind::Linear, tokens * di * (r + 2 * n));
        rep.macs(&format!("{name}.dt_proj"), FlopKind::Linear, tokens * r * di);
        rep.elementwise(&format!("{name}.softplus"), FlopKind::Activation, tokens * di, 1);
        // Per state element: Δ·A, exp, Δ·B·u (2), Ā·h + ·(2), C·h (2).
        rep.elementwise(&format!("{name}.scan"), FlopKind::Scan, tokens * di * n, 8);
        rep.elementwise(&format!("{name}.scan.skip"), FlopKind::Scan, tokens * di, 2);
        rep.elementwise(&format!("{name}.gate"), FlopKind::Activation, tokens * di, 1);
        rep.macs(&format!("{name}.out_proj"), FlopKind::Linear, tokens * di * d);
    }
}

/// `fuse([fwd(x), flip(bwd(flip(x)))])` along the sequence axis, where `fuse` is
/// a kernel-1 transposed conv from `2d` to `d` channels.
#[derive(Clone, Debug)]
pub struct BiMamba {
    pub fwd: MambaUnit,
    pub bwd: MambaUnit,
    /// `[2d, d]`, laid out like a transposed-conv weight `[in, out]`.
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
}

impl BiMamba {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, d: usize, cfg: MambaConfig) -> Result<Self> {
        let fwd = MambaUnit::new(&mut pb.sub("fwd"), d, cfg)?;
        let bwd = MambaUnit::new(&mut pb.sub("bwd"), d, cfg)?;
        let bound = fan_in_bound(d);
        let fuse_w = pb.param("fuse.weight", &[2 * d, d], Init::Uniform(bound))?;
        let fuse_b = pb.param("fuse.bias", &[d], Init::Uniform(bound))?;
        Ok(Self { fwd, bwd, fuse_w, fuse_b })
    }

    pub fn param_count(&self) -> usize {
        let d = self.fwd.d_model;
        self.fwd.param_count() + self.bwd.param_count() + 2 * d * d + d
    }

    /// The two direction outputs before fusion, concatenated on the channel axis.
    pub fn branches<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let f = self.fwd.forward(g, ps, x)?;
        let xr = g.flip(x, 1)?;
        let b = self.bwd.forward(g, ps, &xr)?;
        let b = g.flip(&b, 1)?;
        g.concat(&[&f, &b], 2)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let cat = self.branches(g, ps, x)?;
        let w = g.param(ps, self.fuse_w);
        let wt = g.permute(&w, &[1, 0])?;
        let b = g.param(ps, self.fuse_b);
        g.linear(&cat, &wt, Some(&b))
    }

    pub fn flops(&self, name: &str, batch: usize, len: usize, rep: &mut FlopsReport) {
        self.fwd.flops(&format!("{name}.fwd"), batch, len, rep);
        self.bwd.flops(&format!("{name}.bwd"), batch, len, rep);
        let d = self.fwd.d_model as u64;
        rep.macs(&format!("{name}.fuse"), FlopKind::Linear, (batch * len) as u64 * 2 * d * d);
    }
}
