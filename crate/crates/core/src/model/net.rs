use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{AudioBuffer, StftPlan, DEFAULT_SAMPLE_RATE};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, Conv2dSpec, ConvBlock, DenseBlock, LearnableSigmoid, NormAct, ParamBuilder, PatchEmbed, SubPixelConv};
use crate::seq::{BlockOptions, MambAttention};
use crate::tensor::{Array, Graph, ParamStore, Real, Var};

use super::config::{ModelConfig, RwsaPairing, LEVELS};

/// Depth of the dilated dense blocks in the encoder and both decoders.
pub const DENSE_DEPTH: usize = 4;

/// Conv block, dilated dense block, then a conv block that halves the frequency axis.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub conv_in: ConvBlock,
    pub dense: DenseBlock,
    pub conv_out: ConvBlock,
}

impl Encoder {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, c: usize) -> Result<Self> {
        Ok(Self {
            conv_in: ConvBlock::new(&mut pb.sub("conv_in"), Conv2dSpec::new(2, c, (1, 1)))?,
            dense: DenseBlock::new(&mut pb.sub("dense"), c, DENSE_DEPTH)?,
            conv_out: ConvBlock::new(&mut pb.sub("conv_out"), Conv2dSpec::new(c, c, (1, 3)).stride((1, 2)))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv_in.forward(g, ps, x)?;
        let y = self.dense.forward(g, ps, &y)?;
        self.conv_out.forward(g, ps, &y)
    }
}

/// Patch embedding followed by a stack of blocks.
#[derive(Clone, Debug)]
pub struct Stack {
    pub embed: PatchEmbed,
    pub blocks: Vec<MambAttention>,
}

impl Stack {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut y = self.embed.forward(g, ps, x)?;
        for b in &self.blocks {
            y = b.forward(g, ps, &y)?;
        }
        Ok(y)
    }
}

/// Transposed-conv upsampling, concat with the skip, then a stack.
#[derive(Clone, Debug)]
pub struct UpLevel {
    pub upsample: Conv2d,
    pub stack: Stack,
}

/// Patch embedding, TF-Mamba blocks and a 3×3 conv.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub stack: Stack,
    pub conv: Conv2d,
}

impl Refinement {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.stack.forward(g, ps, x)?;
        self.conv.forward(g, ps, &y)
    }
}

/// Dense block, sub-pixel conv back to the full frequency axis, norm and PReLU.
#[derive(Clone, Debug)]
pub struct DecoderTrunk {
    pub dense: DenseBlock,
    pub subpixel: SubPixelConv,
    pub norm_act: NormAct,
}

impl DecoderTrunk {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, c: usize) -> Result<Self> {
        Ok(Self {
            dense: DenseBlock::new(&mut pb.sub("dense"), c, DENSE_DEPTH)?,
            subpixel: SubPixelConv::new(&mut pb.sub("subpixel"), c, c, 2)?,
            norm_act: NormAct::new(pb, c)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.dense.forward(g, ps, x)?;
        let y = self.subpixel.forward(g, ps, &y)?;
        self.norm_act.forward(g, ps, &y)
    }
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub trunk: DecoderTrunk,
    /// 1×1 deconvolution from `C` channels to one.
    pub proj: Conv2d,
    pub sigmoid: LearnableSigmoid,
}

#[derive(Clone, Debug)]
pub struct PhaseDecoder {
    pub trunk: DecoderTrunk,
    pub real: Conv2d,
    pub imag: Conv2d,
}

/// Activations of one forward pass. Spectral maps are `[B, T, F]` over the padded input.
pub struct ForwardOutput<T> {
    /// Enhanced waveform `[B, L]`, trimmed to the input length.
    pub wave: Var<T>,
    /// Enhanced complex spectrum `[B, 2, T, F]` (uncompressed).
    pub spec: Var<T>,
    pub mask: Var<T>,
    /// Compressed enhanced magnitude.
    pub mag_c: Var<T>,
    pub phase: Var<T>,
    pub noisy_mag_c: Var<T>,
    pub noisy_phase: Var<T>,
    /// Length the network ran on.
    pub padded_len: usize,
    /// `(junction, shape)` in execution order.
    pub junctions: Vec<(String, Vec<usize>)>,
}

/// Result of enhancing one clip outside a training graph.
#[derive(Clone, Debug)]
pub struct Enhancement {
    pub audio: AudioBuffer,
    /// `[T, F]` row-major.
    pub mask: Vec<f64>,
    /// Uncompressed enhanced magnitude, `[T, F]`.
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
}

/// The full enhancement network. It only holds parameter ids; the values live in a
/// [`ParamStore`] so one model serves any precision.
#[derive(Clone, Debug)]
pub struct RwsaMambaUNet {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    /// Levels 0 and 1.
    pub down: Vec<Stack>,
    pub downsample: Vec<Conv2d>,
    pub bottleneck: Stack,
    /// Indexed by level; run from the deepest one up.
    pub up: Vec<UpLevel>,
    pub mag_refine: Refinement,
    pub phase_refine: Refinement,
    pub mask_decoder: MaskDecoder,
    pub phase_decoder: PhaseDecoder,
}

fn push<T: Real>(j: &mut Vec<(String, Vec<usize>)>, name: impl Into<String>, v: &Var<T>) {
    j.push((name.into(), v.shape().to_vec()));
}

impl RwsaMambaUNet {
    /// Builds the network and registers its parameters in `store`, initialized from `seed`.
    pub fn build<T: Real>(cfg: ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(store, &mut rng);
        let c = cfg.channels;
        let opts = |level: usize, attention: bool| BlockOptions {
            heads: cfg.heads(level),
            attention: attention && cfg.mha,
            share_tf: cfg.share_tf,
            mamba: cfg.mamba,
        };
        let encoder = Encoder::new(&mut pb.sub("encoder"), c)?;

        let mut down = Vec::new();
        let mut downsample = Vec::new();
        for level in 0..LEVELS - 1 {
            let w = cfg.width(level);
            let mut sp = pb.sub(&format!("down{level}"));
            let embed = PatchEmbed::new(&mut sp.sub("embed"), w, w)?;
            let mut blocks: Vec<MambAttention> = Vec::new();
            for i in 0..cfg.blocks {
                let mut bp = sp.sub(&format!("block{i}"));
                let shared_level = cfg.rwsa && cfg.mha && cfg.rwsa_pairing == RwsaPairing::PerLevel && i > 0;
                let b = if shared_level {
                    MambAttention::new_tied(&mut bp, &blocks[0], opts(level, true), cfg.tie_norm)?
                } else {
                    MambAttention::new(&mut bp, w, opts(level, true))?
                };
                blocks.push(b);
            }
            down.push(Stack { embed, blocks });
            let spec = Conv2dSpec::new(w, 2 * w, (3, 3)).stride((2, 2));
            downsample.push(Conv2d::new(&mut pb.sub(&format!("downsample{level}")), spec)?);
        }

        let last = LEVELS - 1;
        let wb = cfg.width(last);
        let bottleneck = {
            let mut sp = pb.sub("bottleneck");
            let embed = PatchEmbed::new(&mut sp.sub("embed"), wb, wb)?;
            let blocks = (0..cfg.blocks)
                .map(|i| MambAttention::new(&mut sp.sub(&format!("block{i}")), wb, opts(last, true)))
                .collect::<Result<_>>()?;
            Stack { embed, blocks }
        };

        let mut up = Vec::new();
        for level in 0..LEVELS - 1 {
            let w = cfg.width(level);
            let mut sp = pb.sub(&format!("up{level}"));
            let spec = Conv2dSpec::new(2 * w, w, (3, 3)).stride((2, 2)).transposed();
            let upsample = Conv2d::new(&mut sp.sub("upsample"), spec)?;
            let embed = PatchEmbed::new(&mut sp.sub("embed"), 2 * w, w)?;
            let mut blocks = Vec::new();
            for i in 0..cfg.blocks {
                let mut bp = sp.sub(&format!("block{i}"));
                let b = if cfg.rwsa && cfg.mha {
                    let partner = match cfg.rwsa_pairing {
                        RwsaPairing::PerBlock => &down[level].blocks[i],
                        RwsaPairing::PerLevel => &down[level].blocks[0],
                    };
                    MambAttention::new_tied(&mut bp, partner, opts(level, true), cfg.tie_norm)?
                } else {
                    MambAttention::new(&mut bp, w, opts(level, true))?
                };
                blocks.push(b);
            }
            up.push(UpLevel { upsample, stack: Stack { embed, blocks } });
        }

        let mut refinement = |name: &str| -> Result<Refinement> {
            let mut sp = pb.sub(name);
            let embed = PatchEmbed::new(&mut sp.sub("embed"), c, c)?;
            let blocks = (0..cfg.blocks)
                .map(|i| MambAttention::new(&mut sp.sub(&format!("block{i}")), c, opts(0, false)))
                .collect::<Result<_>>()?;
            let conv = Conv2d::new(&mut sp.sub("conv"), Conv2dSpec::new(c, c, (3, 3)))?;
            Ok(Refinement { stack: Stack { embed, blocks }, conv })
        };
        let mag_refine = refinement("mag_refine")?;
        let phase_refine = refinement("phase_refine")?;

        let mask_decoder = {
            let mut sp = pb.sub("mask_decoder");
            MaskDecoder {
                trunk: DecoderTrunk::new(&mut sp, c)?,
                proj: Conv2d::new(&mut sp.sub("proj"), Conv2dSpec::new(c, 1, (1, 1)).transposed())?,
                sigmoid: LearnableSigmoid::new(&mut sp.sub("lsigmoid"), cfg.stft.bins(), cfg.beta)?,
            }
        };
        let phase_decoder = {
            let mut sp = pb.sub("phase_decoder");
            PhaseDecoder {
                trunk: DecoderTrunk::new(&mut sp, c)?,
                real: Conv2d::new(&mut sp.sub("real"), Conv2dSpec::new(c, 1, (1, 1)))?,
                imag: Conv2d::new(&mut sp.sub("imag"), Conv2dSpec::new(c, 1, (1, 1)))?,
            }
        };
        Ok(Self { cfg, encoder, down, downsample, bottleneck, up, mag_refine, phase_refine, mask_decoder, phase_decoder })
    }

    /// Every block, tagged `(path, level)`, in construction order.
    pub fn blocks(&self) -> Vec<(String, usize, &MambAttention)> {
        let mut out = Vec::new();
        for (l, s) in self.down.iter().enumerate() {
            out.extend(s.blocks.iter().enumerate().map(|(i, b)| (format!("down{l}.block{i}"), l, b)));
        }
        out.extend(self.bottleneck.blocks.iter().enumerate().map(|(i, b)| (format!("bottleneck.block{i}"), LEVELS - 1, b)));
        for (l, u) in self.up.iter().enumerate() {
            out.extend(u.stack.blocks.iter().enumerate().map(|(i, b)| (format!("up{l}.block{i}"), l, b)));
        }
        for (name, r) in [("mag_refine", &self.mag_refine), ("phase_refine", &self.phase_refine)] {
            out.extend(r.stack.blocks.iter().enumerate().map(|(i, b)| (format!("{name}.block{i}"), 0, b)));
        }
        out
    }

    /// `[B, 2, T, F]` encoder input (compressed magnitude, wrapped phase) to the
    /// U-Net output `[B, C, T, F/2]` plus the encoder output.
    fn trunk<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: &Var<T>,
        j: &mut Vec<(String, Vec<usize>)>,
    ) -> Result<(Var<T>, Var<T>)> {
        let enc = self.encoder.forward(g, ps, x)?;
        push(j, "encoder", &enc);
        let mut skips = Vec::new();
        let mut h = enc.clone();
        for (level, (stack, ds)) in self.down.iter().zip(&self.downsample).enumerate() {
            let y = stack.forward(g, ps, &h)?;
            let y = g.add(&y, &h)?;
            push(j, format!("down{level}"), &y);
            h = ds.forward(g, ps, &y)?;
            push(j, format!("downsample{level}"), &h);
            skips.push(y);
        }
        let y = self.bottleneck.forward(g, ps, &h)?;
        h = g.add(&y, &h)?;
        push(j, "bottleneck", &h);
        for level in (0..LEVELS - 1).rev() {
            let u = &self.up[level];
            let upv = u.upsample.forward(g, ps, &h)?;
            push(j, format!("upsample{level}"), &upv);
            let cat = g.concat(&[&upv, &skips[level]], 1)?;
            push(j, format!("concat{level}"), &cat);
            let y = u.stack.forward(g, ps, &cat)?;
            h = g.add(&y, &upv)?;
            push(j, format!("up{level}"), &h);
        }
        Ok((h, enc))
    }

    /// Forward pass over `[B, L]` noisy waveforms.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, noisy: &Var<T>) -> Result<ForwardOutput<T>> {
        let &[b, len] = noisy.shape() else {
            return shape_err("model", format!("expected [B, L] waveforms, got {:?}", noisy.shape()));
        };
        let cfg = &self.cfg;
        if len < cfg.stft.hop {
            return Err(Error::Audio(format!("input of {len} samples is shorter than one hop ({})", cfg.stft.hop)));
        }
        let plan = StftPlan::<T>::new(cfg.stft)?;
        let padded_len = cfg.padded_len(len);
        let x = if padded_len > len { g.pad(noisy, 1, 0, padded_len - len)? } else { noisy.clone() };
        let mut j = Vec::new();
        let (noisy_mag_c, noisy_phase) = compressed_polar(g, &plan, &x, cfg.compress)?;
        let (t, f) = (noisy_mag_c.shape()[1], noisy_mag_c.shape()[2]);
        let m4 = g.reshape(&noisy_mag_c, &[b, 1, t, f])?;
        let p4 = g.reshape(&noisy_phase, &[b, 1, t, f])?;
        let input = g.concat(&[&m4, &p4], 1)?;
        push(&mut j, "input", &input);

        let (u, enc) = self.trunk(g, ps, &input, &mut j)?;
        let mag = self.mag_refine.forward(g, ps, &u)?;
        let mag = g.add(&mag, &enc)?;
        push(&mut j, "mag_refine", &mag);
        let pha = self.phase_refine.forward(g, ps, &u)?;
        let pha = g.add(&pha, &enc)?;
        push(&mut j, "phase_refine", &pha);

        let md = &self.mask_decoder;
        let y = md.trunk.forward(g, ps, &mag)?;
        let y = md.proj.forward(g, ps, &y)?;
        let y = g.reshape(&y, &[b, t, f])?;
        let mask = md.sigmoid.forward(g, ps, &y)?;
        push(&mut j, "mask", &mask);
        let mag_c = g.mul(&mask, &noisy_mag_c)?;

        let pd = &self.phase_decoder;
        let y = pd.trunk.forward(g, ps, &pha)?;
        let re = pd.real.forward(g, ps, &y)?;
        let im = pd.imag.forward(g, ps, &y)?;
        let phase = g.atan2(&im, &re)?;
        let phase = g.reshape(&phase, &[b, t, f])?;
        push(&mut j, "phase", &phase);

        let spec = polar_to_spec(g, &mag_c, &phase, cfg.compress)?;
        let wave = g.istft(&spec, &plan, padded_len)?;
        let wave = if padded_len > len { g.slice(&wave, 1, 0, len)? } else { wave };
        push(&mut j, "output", &wave);
        Ok(ForwardOutput { wave, spec, mask, mag_c, phase, noisy_mag_c, noisy_phase, padded_len, junctions: j })
    }

    /// Enhances one clip without recording gradients.
    pub fn enhance<T: Real>(&self, ps: &ParamStore<T>, noisy: &AudioBuffer) -> Result<Enhancement> {
        if noisy.sample_rate != DEFAULT_SAMPLE_RATE {
            return Err(Error::Audio(format!("expected {DEFAULT_SAMPLE_RATE} Hz input, got {} Hz", noisy.sample_rate)));
        }
        let mut g = Graph::<T>::inference();
        let x = g.constant(Array::from_f64(&[1, noisy.len()], &noisy.samples)?);
        let out = self.forward(&mut g, ps, &x)?;
        let (frames, bins) = (out.mask.shape()[1], out.mask.shape()[2]);
        let magnitude = out.mag_c.value().to_f64_vec().iter().map(|v| v.powf(1.0 / self.cfg.compress)).collect();
        Ok(Enhancement {
            audio: AudioBuffer::new(out.wave.value().to_f64_vec(), noisy.sample_rate)?,
            mask: out.mask.value().to_f64_vec(),
            magnitude,
            phase: out.phase.value().to_f64_vec(),
            frames,
            bins,
        })
    }
}

/// `[B, L]` waveforms → compressed magnitude and wrapped phase, each `[B, T, F]`.
pub fn compressed_polar<T: Real>(g: &mut Graph<T>, plan: &StftPlan<T>, x: &Var<T>, c: f64) -> Result<(Var<T>, Var<T>)> {
    let s = g.stft(x, plan)?;
    let (b, t, f) = (s.shape()[0], s.shape()[2], s.shape()[3]);
    let re = g.slice(&s, 1, 0, 1)?;
    let im = g.slice(&s, 1, 1, 1)?;
    let re = g.reshape(&re, &[b, t, f])?;
    let im = g.reshape(&im, &[b, t, f])?;
    let (r2, i2) = (g.square(&re)?, g.square(&im)?);
    let p = g.add(&r2, &i2)?;
    let mag_c = g.powf(&p, c / 2.0)?;
    let phase = g.atan2(&im, &re)?;
    Ok((mag_c, phase))
}

/// Compressed magnitude and phase `[B, T, F]` → uncompressed complex spectrum `[B, 2, T, F]`.
pub fn polar_to_spec<T: Real>(g: &mut Graph<T>, mag_c: &Var<T>, phase: &Var<T>, c: f64) -> Result<Var<T>> {
    let &[b, t, f] = mag_c.shape() else {
        return shape_err("polar_to_spec", format!("expected [B, T, F], got {:?}", mag_c.shape()));
    };
    let mag = g.powf(mag_c, 1.0 / c)?;
    let (cos, sin) = (g.cos(phase)?, g.sin(phase)?);
    let re = g.mul(&mag, &cos)?;
    let im = g.mul(&mag, &sin)?;
    let re = g.reshape(&re, &[b, 1, t, f])?;
    let im = g.reshape(&im, &[b, 1, t, f])?;
    g.concat(&[&re, &im], 1)
}
