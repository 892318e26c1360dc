//! Multi-head self-attention and the layer-normed attention unit shared across paths.

use crate::error::{shape_err, Error, Result};
use crate::nn::{fan_in_bound, FlopKind, FlopsReport, Init, ParamBuilder};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Scaled dot-product self-attention over `[batch, len, d]` with `heads` heads.
#[derive(Clone, Debug)]
pub struct Mha {
    pub d_model: usize,
    pub heads: usize,
    /// `[3d, d]`: query, key and value projections stacked.
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl Mha {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Invalid(format!("width {d} not divisible by {heads} heads")));
        }
        let bound = fan_in_bound(d);
        Ok(Self {
            d_model: d,
            heads,
            in_w: pb.param("in_proj.weight", &[3 * d, d], Init::Uniform(bound))?,
            in_b: pb.param("in_proj.bias", &[3 * d], Init::Zeros)?,
            out_w: pb.param("out_proj.weight", &[d, d], Init::Uniform(bound))?,
            out_b: pb.param("out_proj.bias", &[d], Init::Zeros)?,
        })
    }

    pub fn param_count(d: usize) -> usize {
        4 * d * d + 4 * d
    }

    /// Returns the output and the attention weights `[batch·heads, len, len]`.
    pub fn forward_with_weights<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let (d, h) = (self.d_model, self.heads);
        let &[batch, len, dx] = x.shape() else {
            return shape_err("mha", format!("expected [batch, len, {d}], got {:?}", x.shape()));
        };
        if dx != d {
            return shape_err("mha", format!("width {dx} for a {d}-wide attention"));
        }
        let dh = d / h;
        let (w, b) = (g.param(ps, self.in_w), g.param(ps, self.in_b));
        let qkv = g.linear(x, &w, Some(&b))?;
        let qkv = g.reshape(&qkv, &[batch, len, 3, h, dh])?;
        let qkv = g.permute(&qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let p = g.slice(&qkv, 0, i, 1)?;
            parts.push(g.reshape(&p, &[batch * h, len, dh])?);
        }
        let scores = g.bmm(&parts[0], &parts[1], true)?;
        let scores = g.scale(&scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(&scores)?;
        let ctx = g.bmm(&attn, &parts[2], false)?;
        let ctx = g.reshape(&ctx, &[batch, h, len, dh])?;
        let ctx = g.permute(&ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(&ctx, &[batch, len, d])?;
        let (ow, ob) = (g.param(ps, self.out_w), g.param(ps, self.out_b));
        Ok((g.linear(&ctx, &ow, Some(&ob))?, attn))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_with_weights(g, ps, x)?.0)
    }

    pub fn flops(&self, name: &str, batch: usize, len: usize, rep: &mut FlopsReport) {
        let (tokens, d, l) = ((batch * len) as u64, self.d_model as u64, len as u64);
        rep.macs(&format!("{name}.in_proj"), FlopKind::Linear, tokens * d * 3 * d);
        // QKᵀ and attn·V: each len² · d per sequence, summed over heads.
        rep.macs(&format!("{name}.scores"), FlopKind::AttentionScores, 2 * batch as u64 * l * l * d);
        rep.elementwise(&format!("{name}.softmax"), FlopKind::Softmax, batch as u64 * self.heads as u64 * l * l, 5);
        rep.macs(&format!("{name}.out_proj"), FlopKind::Linear, tokens * d * d);
    }
}

/// `MHA(LN(x))`: the unit a MambAttention block shares between its time and
/// frequency paths, and that resolution-wise sharing ties across the U-Net.
#[derive(Clone, Debug)]
pub struct AttentionUnit {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub mha: Mha,
}

impl AttentionUnit {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_gamma: pb.param("norm.weight", &[d], Init::Const(1.0))?,
            ln_beta: pb.param("norm.bias", &[d], Init::Zeros)?,
            mha: Mha::new(&mut pb.sub("mha"), d, heads)?,
        })
    }

    /// Registers the sites of this unit under `pb`'s prefix as aliases of `canonical`.
    /// With `share_norm` false the layer norm gets fresh parameters and only the
    /// attention weights are tied.
    pub fn tied<T: Real>(pb: &mut ParamBuilder<'_, T>, canonical: &AttentionUnit, share_norm: bool) -> Result<Self> {
        let mut unit = canonical.clone();
        if !share_norm {
            let d = canonical.mha.d_model;
            unit.ln_gamma = pb.param("norm.weight", &[d], Init::Const(1.0))?;
            unit.ln_beta = pb.param("norm.bias", &[d], Init::Zeros)?;
        }
        for (name, id) in canonical.sites() {
            if !share_norm && name.starts_with("norm.") {
                continue;
            }
            let site = pb.path(name);
            let shape = pb.store().value(id).shape().to_vec();
            pb.store().tie(id, &site, &shape)?;
        }
        Ok(unit)
    }

    fn sites(&self) -> [(&'static str, ParamId); 6] {
        [
            ("norm.weight", self.ln_gamma),
            ("norm.bias", self.ln_beta),
            ("mha.in_proj.weight", self.mha.in_w),
            ("mha.in_proj.bias", self.mha.in_b),
            ("mha.out_proj.weight", self.mha.out_w),
            ("mha.out_proj.bias", self.mha.out_b),
        ]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.sites().iter().map(|(_, id)| *id).collect()
    }

    pub fn param_count(d: usize) -> usize {
        Mha::param_count(d) + 2 * d
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let (gm, bt) = (g.param(ps, self.ln_gamma), g.param(ps, self.ln_beta));
        let y = g.layer_norm(x, &gm, &bt, LAYER_NORM_EPS)?;
        self.mha.forward(g, ps, &y)
    }

    pub fn flops(&self, name: &str, batch: usize, len: usize, rep: &mut FlopsReport) {
        let d = self.mha.d_model as u64;
        rep.elementwise(&format!("{name}.norm"), FlopKind::Norm, (batch * len) as u64 * d, 5);
        self.mha.flops(&format!("{name}.mha"), batch, len, rep);
    }
}
