//! Axis-checked feature maps and the MambAttention / TF-Mamba blocks.

use crate::error::{shape_err, Error, Result};
use crate::nn::{FlopsReport, ParamBuilder};
use crate::tensor::{Graph, ParamStore, Real, Var};

use super::mamba::{BiMamba, MambaConfig};
use super::mha::AttentionUnit;

/// Which axes a [`FeatureMap`]'s array currently holds, with the logical extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `[B, C, T, F]`.
    Grid,
    /// `[B·F, T, C]`: one sequence along time per frequency bin.
    TimeSeq,
    /// `[B·T, F, C]`: one sequence along frequency per frame.
    FreqSeq,
}

#[derive(Clone, Debug)]
pub struct FeatureMap<T> {
    var: Var<T>,
    layout: Layout,
    /// Logical `[B, C, T, F]` extents, fixed for the map's lifetime.
    dims: [usize; 4],
}

impl<T: Real> FeatureMap<T> {
    pub fn grid(var: Var<T>) -> Result<Self> {
        let &[b, c, t, f] = var.shape() else {
            return Err(Error::Layout(format!("expected [B, C, T, F], got {:?}", var.shape())));
        };
        Ok(Self { var, layout: Layout::Grid, dims: [b, c, t, f] })
    }

    pub fn var(&self) -> &Var<T> {
        &self.var
    }

    pub fn into_var(self) -> Var<T> {
        self.var
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    fn expect(&self, want: Layout) -> Result<()> {
        let [b, c, t, f] = self.dims;
        let shape: Vec<usize> = match self.layout {
            Layout::Grid => vec![b, c, t, f],
            Layout::TimeSeq => vec![b * f, t, c],
            Layout::FreqSeq => vec![b * t, f, c],
        };
        if self.layout != want {
            return Err(Error::Layout(format!("expected {want:?}, map is {:?}", self.layout)));
        }
        if self.var.shape() != shape {
            return Err(Error::Layout(format!("{:?} array {:?} disagrees with extents {:?}", self.layout, self.var.shape(), self.dims)));
        }
        Ok(())
    }

    /// `[B, C, T, F] → [B·F, T, C]`.
    pub fn to_time_seq(self, g: &mut Graph<T>) -> Result<Self> {
        self.expect(Layout::Grid)?;
        let [b, c, t, f] = self.dims;
        let v = g.permute(&self.var, &[0, 3, 2, 1])?;
        let var = g.reshape(&v, &[b * f, t, c])?;
        Ok(Self { var, layout: Layout::TimeSeq, ..self })
    }

    /// `[B·F, T, C] → [B·T, F, C]`.
    pub fn time_to_freq(self, g: &mut Graph<T>) -> Result<Self> {
        self.expect(Layout::TimeSeq)?;
        let [b, c, t, f] = self.dims;
        let v = g.reshape(&self.var, &[b, f, t, c])?;
        let v = g.permute(&v, &[0, 2, 1, 3])?;
        let var = g.reshape(&v, &[b * t, f, c])?;
        Ok(Self { var, layout: Layout::FreqSeq, ..self })
    }

    /// `[B·T, F, C] → [B, C, T, F]`.
    pub fn freq_to_grid(self, g: &mut Graph<T>) -> Result<Self> {
        self.expect(Layout::FreqSeq)?;
        let [b, c, t, f] = self.dims;
        let v = g.reshape(&self.var, &[b, t, f, c])?;
        let var = g.permute(&v, &[0, 3, 1, 2])?;
        Ok(Self { var, layout: Layout::Grid, ..self })
    }

    /// Replaces the array by `f(array)`, which must keep the shape.
    pub fn map(self, f: impl FnOnce(&Var<T>) -> Result<Var<T>>) -> Result<Self> {
        let var = f(&self.var)?;
        if var.shape() != self.var.shape() {
            return Err(Error::Layout(format!("sequence op changed {:?} into {:?}", self.var.shape(), var.shape())));
        }
        Ok(Self { var, ..self })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockOptions {
    pub heads: usize,
    /// Without attention the block is a plain TF-Mamba block.
    pub attention: bool,
    /// Time and frequency paths use one attention unit.
    pub share_tf: bool,
    pub mamba: MambaConfig,
}

/// Per time then frequency stage:
/// `X1 = X + MHA(LN X)`, `X2 = X1 + Mamba(X1)` along time, the same along frequency.
#[derive(Clone, Debug)]
pub struct MambAttention {
    pub width: usize,
    pub t_attn: Option<AttentionUnit>,
    pub f_attn: Option<AttentionUnit>,
    pub t_mamba: BiMamba,
    pub f_mamba: BiMamba,
}

/// Intermediate activations `X1..X4` (sequence layouts) and the block output.
pub struct BlockTrace<T> {
    pub stages: Vec<Var<T>>,
    pub output: Var<T>,
}

impl MambAttention {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, width: usize, opts: BlockOptions) -> Result<Self> {
        let (t_attn, f_attn) = if opts.attention {
            let t = AttentionUnit::new(&mut pb.sub("t_attn"), width, opts.heads)?;
            let f = if opts.share_tf {
                AttentionUnit::tied(&mut pb.sub("f_attn"), &t, true)?
            } else {
                AttentionUnit::new(&mut pb.sub("f_attn"), width, opts.heads)?
            };
            (Some(t), Some(f))
        } else {
            (None, None)
        };
        Ok(Self {
            width,
            t_attn,
            f_attn,
            t_mamba: BiMamba::new(&mut pb.sub("t_mamba"), width, opts.mamba)?,
            f_mamba: BiMamba::new(&mut pb.sub("f_mamba"), width, opts.mamba)?,
        })
    }

    /// Same layout as `partner`, with every attention site aliased to the partner's
    /// canonical parameters. Mamba weights stay independent.
    pub fn new_tied<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        partner: &MambAttention,
        opts: BlockOptions,
        share_norm: bool,
    ) -> Result<Self> {
        let (t_attn, f_attn) = match (&partner.t_attn, &partner.f_attn) {
            (Some(t), Some(f)) => {
                let tt = AttentionUnit::tied(&mut pb.sub("t_attn"), t, share_norm)?;
                let ff = if opts.share_tf && f.param_ids() == t.param_ids() {
                    AttentionUnit::tied(&mut pb.sub("f_attn"), &tt, true)?
                } else {
                    AttentionUnit::tied(&mut pb.sub("f_attn"), f, share_norm)?
                };
                (Some(tt), Some(ff))
            }
            _ => return Err(Error::Invalid("cannot tie attention of a block without attention".into())),
        };
        Ok(Self {
            width: partner.width,
            t_attn,
            f_attn,
            t_mamba: BiMamba::new(&mut pb.sub("t_mamba"), partner.width, opts.mamba)?,
            f_mamba: BiMamba::new(&mut pb.sub("f_mamba"), partner.width, opts.mamba)?,
        })
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<BlockTrace<T>> {
        if x.shape().get(1) != Some(&self.width) {
            return shape_err("mambattention", format!("input {:?} for width {}", x.shape(), self.width));
        }
        let mut stages = Vec::with_capacity(4);
        let mut fm = FeatureMap::grid(x.clone())?.to_time_seq(g)?;
        for (attn, mamba, last) in [(&self.t_attn, &self.t_mamba, false), (&self.f_attn, &self.f_mamba, true)] {
            if let Some(a) = attn {
                fm = fm.map(|v| {
                    let y = a.forward(g, ps, v)?;
                    g.add(v, &y)
                })?;
                stages.push(fm.var().clone());
            }
            fm = fm.map(|v| {
                let y = mamba.forward(g, ps, v)?;
                g.add(v, &y)
            })?;
            stages.push(fm.var().clone());
            fm = if last { fm.freq_to_grid(g)? } else { fm.time_to_freq(g)? };
        }
        Ok(BlockTrace { stages, output: fm.into_var() })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.trace(g, ps, x)?.output)
    }

    /// FLOPs for one item with activation extents `[C, T, F]`.
    pub fn flops(&self, name: &str, s: [usize; 3], rep: &mut FlopsReport) {
        let [_, t, f] = s;
        if let Some(a) = &self.t_attn {
            a.flops(&format!("{name}.t_attn"), f, t, rep);
        }
        self.t_mamba.flops(&format!("{name}.t_mamba"), f, t, rep);
        if let Some(a) = &self.f_attn {
            a.flops(&format!("{name}.f_attn"), t, f, rep);
        }
        self.f_mamba.flops(&format!("{name}.f_mamba"), t, f, rep);
    }
}
