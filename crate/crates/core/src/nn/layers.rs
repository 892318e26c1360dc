//! Parameterized layers. Each holds the ids of its weights in a [`ParamStore`] and
//! runs on any graph precision.

use crate::error::{shape_err, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};

use super::flops::{FlopKind, FlopsReport};
use super::norm::INSTANCE_NORM_EPS;
use super::{fan_in_bound, Conv2dSpec, Init, ParamBuilder};

/// Activation extents of one batch item: `[C, T, F]`.
pub type ItemShape = [usize; 3];

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: Conv2dSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, spec: Conv2dSpec) -> Result<Self> {
        spec.validate()?;
        let [_, per_group, kh, kw] = spec.weight_shape();
        let bound = fan_in_bound(per_group * kh * kw);
        Self::with_init(pb, spec, Init::Uniform(bound), Init::Uniform(bound))
    }

    /// All weights and biases start at zero.
    pub fn zeroed<T: Real>(pb: &mut ParamBuilder<'_, T>, spec: Conv2dSpec) -> Result<Self> {
        spec.validate()?;
        Self::with_init(pb, spec, Init::Zeros, Init::Zeros)
    }

    fn with_init<T: Real>(pb: &mut ParamBuilder<'_, T>, spec: Conv2dSpec, w: Init, b: Init) -> Result<Self> {
        let weight = pb.param("weight", &spec.weight_shape(), w)?;
        let bias = if spec.bias { Some(pb.param("bias", &[spec.out_ch], b)?) } else { None };
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d(x, &w, b.as_ref(), self.spec)
    }

    pub fn out_shape(&self, s: ItemShape) -> Result<ItemShape> {
        if s[0] != self.spec.in_ch {
            return shape_err("conv2d", format!("{} channels into {:?}", s[0], self.spec));
        }
        let (t, f) = self.spec.output_extent(s[1], s[2])?;
        Ok([self.spec.out_ch, t, f])
    }

    pub fn flops(&self, name: &str, s: ItemShape, rep: &mut FlopsReport) -> Result<ItemShape> {
        let out = self.out_shape(s)?;
        let macs = if self.spec.transposed { self.spec.macs(s[1], s[2]) } else { self.spec.macs(out[1], out[2]) };
        rep.macs(name, FlopKind::Conv, macs);
        Ok(out)
    }
}

/// Instance norm with affine followed by per-channel PReLU.
#[derive(Clone, Debug)]
pub struct NormAct {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slope: ParamId,
}

pub const PRELU_INIT: f64 = 0.2;

impl NormAct {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        let mut n = pb.sub("norm");
        let gamma = n.param("weight", &[channels], Init::Const(1.0))?;
        let beta = n.param("bias", &[channels], Init::Zeros)?;
        let slope = pb.sub("act").param("weight", &[channels], Init::Const(PRELU_INIT))?;
        Ok(Self { channels, gamma, beta, slope })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let (gm, bt, a) = (g.param(ps, self.gamma), g.param(ps, self.beta), g.param(ps, self.slope));
        let y = g.instance_norm(x, &gm, &bt, INSTANCE_NORM_EPS)?;
        g.prelu(&y, &a)
    }

    pub fn flops(&self, name: &str, s: ItemShape, rep: &mut FlopsReport) -> ItemShape {
        let n = s.iter().product::<usize>() as u64;
        rep.elementwise(&format!("{name}.norm"), FlopKind::Norm, n, 5);
        rep.elementwise(&format!("{name}.act"), FlopKind::Activation, n, 1);
        s
    }
}

/// Convolution followed by [`NormAct`].
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm_act: NormAct,
}

impl ConvBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, spec: Conv2dSpec) -> Result<Self> {
        let conv = Conv2d::new(&mut pb.sub("conv"), spec)?;
        let norm_act = NormAct::new(pb, spec.out_ch)?;
        Ok(Self { conv, norm_act })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv.forward(g, ps, x)?;
        self.norm_act.forward(g, ps, &y)
    }

    pub fn flops(&self, name: &str, s: ItemShape, rep: &mut FlopsReport) -> Result<ItemShape> {
        let s = self.conv.flops(&format!("{name}.conv"), s, rep)?;
        Ok(self.norm_act.flops(name, s, rep))
    }
}

/// Densely connected stack of `(3, 3)` conv blocks with time dilation `2^i` at
/// stage `i`; each stage sees the input and every earlier stage output.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub channels: usize,
    pub stages: Vec<ConvBlock>,
}

impl DenseBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize, depth: usize) -> Result<Self> {
        let stages = (0..depth)
            .map(|i| {
                let spec = Conv2dSpec::new((i + 1) * channels, channels, (3, 3)).dilation((1 << i, 1));
                ConvBlock::new(&mut pb.sub(&format!("stage{i}")), spec)
            })
            .collect::<Result<_>>()?;
        Ok(Self { channels, stages })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().get(1) != Some(&self.channels) {
            return shape_err("dense_block", format!("input {:?} for {} channels", x.shape(), self.channels));
        }
        let mut skip = x.clone();
        let mut out = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            out = stage.forward(g, ps, &skip)?;
            if i + 1 < self.stages.len() {
                skip = g.concat(&[&out, &skip], 1)?;
            }
        }
        Ok(out)
    }

    pub fn flops(&self, name: &str, s: ItemShape, rep: &mut FlopsReport) -> Result<ItemShape> {
        for (i, stage) in self.stages.iter().enumerate() {
            stage.flops(&format!("{name}.stage{i}"), [(i + 1) * self.channels, s[1], s[2]], rep)?;
        }
        Ok([self.channels, s[1], s[2]])
    }
}

/// Conv to `r·out` channels, then [`Graph::freq_shuffle`] to `r×` the frequency bins.
#[derive(Clone, Debug)]
pub struct SubPixelConv {
    pub conv: Conv2d,
    pub r: usize,
}

impl SubPixelConv {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, in_ch: usize, out_ch: usize, r: usize) -> Result<Self> {
        let conv = Conv2d::new(&mut pb.sub("conv"), Conv2dSpec::new(in_ch, out_ch * r, (1, 3)))?;
        Ok(Self { conv, r })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv.forward(g, ps, x)?;
        g.freq_shuffle(&y, self.r)
    }

    pub fn flops(&self, name: &str, s: ItemShape, rep: &mut FlopsReport) -> Result<ItemShape> {
        let [c, t, f] = self.conv.flops(&format!("{name}.conv"), s, rep)?;
        Ok([c / self.r, t, f * self.r])
    }
}

/// `beta · sigmoid(alpha[f] · x)` with a learnable slope per frequency bin.
#[derive(Clone, Debug)]
pub struct LearnableSigmoid {
    pub alpha: ParamId,
    pub beta: f64,
    pub bins: usize,
}

impl LearnableSigmoid {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, bins: usize, beta: f64) -> Result<Self> {
        let alpha = pb.param("alpha", &[bins], Init::Const(1.0))?;
        Ok(Self { alpha, beta, bins })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().last() != Some(&self.bins) {
            return shape_err("learnable_sigmoid", format!("input {:?} for {} bins", x.shape(), self.bins));
        }
        let a = g.param(ps, self.alpha);
        let y = g.mul(x, &a)?;
        let y = g.sigmoid(&y)?;
        g.scale(&y, self.beta)
    }

    pub fn flops(&self, name: &str, s: ItemShape, rep: &mut FlopsReport) -> ItemShape {
        let n = s.iter().product::<usize>() as u64;
        rep.elementwise(name, FlopKind::Activation, n, 3);
        s
    }
}

/// Resolution-preserving token mixer: depthwise 3×3 and pointwise 1×1 convs, then
/// a depthwise deformable 3×3 conv whose offsets are predicted from its input by a
/// zero-initialized 3×3 conv.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
    pub offset: Conv2d,
    pub deform: Conv2d,
}

pub const DEFORM_KERNEL: (usize, usize) = (3, 3);

impl PatchEmbed {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, in_ch: usize, out_ch: usize) -> Result<Self> {
        let taps = DEFORM_KERNEL.0 * DEFORM_KERNEL.1;
        Ok(Self {
            depthwise: Conv2d::new(&mut pb.sub("depthwise"), Conv2dSpec::new(in_ch, in_ch, (3, 3)).groups(in_ch))?,
            pointwise: Conv2d::new(&mut pb.sub("pointwise"), Conv2dSpec::new(in_ch, out_ch, (1, 1)))?,
            offset: Conv2d::zeroed(&mut pb.sub("offset"), Conv2dSpec::new(out_ch, 2 * taps, DEFORM_KERNEL))?,
            deform: Conv2d::new(&mut pb.sub("deform"), Conv2dSpec::new(out_ch, out_ch, DEFORM_KERNEL).groups(out_ch))?,
        })
    }

    /// Output of the separable path, i.e. the deformable conv's input.
    pub fn separable<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.depthwise.forward(g, ps, x)?;
        self.pointwise.forward(g, ps, &y)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.separable(g, ps, x)?;
        let off = self.offset.forward(g, ps, &y)?;
        let w = g.param(ps, self.deform.weight);
        let b = self.deform.bias.map(|b| g.param(ps, b));
        g.deform_conv2d(&y, &off, &w, b.as_ref(), self.deform.spec)
    }

    pub fn flops(&self, name: &str, s: ItemShape, rep: &mut FlopsReport) -> Result<ItemShape> {
        let s = self.depthwise.flops(&format!("{name}.depthwise"), s, rep)?;
        let s = self.pointwise.flops(&format!("{name}.pointwise"), s, rep)?;
        self.offset.flops(&format!("{name}.offset"), s, rep)?;
        let out = self.deform.flops(&format!("{name}.deform"), s, rep)?;
        let taps = (DEFORM_KERNEL.0 * DEFORM_KERNEL.1) as u64;
        rep.macs(&format!("{name}.deform.sampling"), FlopKind::Conv, 4 * taps * out.iter().product::<usize>() as u64);
        Ok(out)
    }
}
