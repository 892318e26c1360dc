use std::collections::BTreeMap;

use crate::dsp::DEFAULT_SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::nn::{FlopKind, FlopsReport, ItemShape};
use crate::tensor::{ParamStore, Real};

use super::config::LEVELS;
use super::net::{RwsaMambaUNet, Stack};

/// Unique parameter counts grouped by top-level module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub per_module: BTreeMap<String, usize>,
    pub total: usize,
    /// Number of alias sites (tied parameter tensors, not scalars).
    pub tied_sites: usize,
}

/// Counts every canonical parameter once, whatever the number of sites reading it.
pub fn count_params<T: Real>(store: &ParamStore<T>) -> ParamCounts {
    let mut per_module = BTreeMap::new();
    for (_, p) in store.iter() {
        let module = p.name.split('.').next().unwrap_or_default().to_string();
        *per_module.entry(module).or_insert(0) += p.value.len();
    }
    ParamCounts { per_module, total: store.count(), tied_sites: store.tie_table().len() }
}

fn stack_flops(stack: &Stack, name: &str, s: ItemShape, rep: &mut FlopsReport) -> Result<ItemShape> {
    let s = stack.embed.flops(&format!("{name}.embed"), s, rep)?;
    for (i, b) in stack.blocks.iter().enumerate() {
        b.flops(&format!("{name}.block{i}"), s, rep);
    }
    Ok(s)
}

impl RwsaMambaUNet {
    /// Analytic FLOPs of one forward pass over a single clip of `seconds` at 16 kHz.
    /// Covers the network between the compressed spectrum and the decoded mask and
    /// phase; the STFT pair and residual additions are not counted.
    pub fn count_flops(&self, seconds: f64) -> Result<FlopsReport> {
        if !(seconds > 0.0 && seconds.is_finite()) {
            return Err(Error::Invalid(format!("duration {seconds} s must be positive")));
        }
        let len = (seconds * DEFAULT_SAMPLE_RATE as f64).round() as usize;
        if len < self.cfg.stft.hop {
            return Err(Error::Invalid(format!("duration {seconds} s is shorter than one hop")));
        }
        let t = self.cfg.stft.frames(self.cfg.padded_len(len));
        let f = self.cfg.stft.bins();
        let mut rep = FlopsReport::new(seconds);
        let r = &mut rep;

        let e = &self.encoder;
        let s = e.conv_in.flops("encoder.conv_in", [2, t, f], r)?;
        let s = e.dense.flops("encoder.dense", s, r)?;
        let enc = e.conv_out.flops("encoder.conv_out", s, r)?;

        let mut s = enc;
        for level in 0..LEVELS - 1 {
            stack_flops(&self.down[level], &format!("down{level}"), s, r)?;
            s = self.downsample[level].flops(&format!("downsample{level}"), s, r)?;
        }
        s = stack_flops(&self.bottleneck, "bottleneck", s, r)?;
        for level in (0..LEVELS - 1).rev() {
            let u = &self.up[level];
            let up = u.upsample.flops(&format!("up{level}.upsample"), s, r)?;
            let cat = [2 * up[0], up[1], up[2]];
            s = stack_flops(&u.stack, &format!("up{level}"), cat, r)?;
        }
        for (name, refine) in [("mag_refine", &self.mag_refine), ("phase_refine", &self.phase_refine)] {
            let y = stack_flops(&refine.stack, name, s, r)?;
            refine.conv.flops(&format!("{name}.conv"), y, r)?;
        }

        let md = &self.mask_decoder;
        let y = md.trunk.dense.flops("mask_decoder.dense", s, r)?;
        let y = md.trunk.subpixel.flops("mask_decoder.subpixel", y, r)?;
        let y = md.trunk.norm_act.flops("mask_decoder", y, r);
        let y = md.proj.flops("mask_decoder.proj", y, r)?;
        md.sigmoid.flops("mask_decoder.lsigmoid", y, r);
        r.elementwise("mask_decoder.apply", FlopKind::Activation, (t * f) as u64, 1);

        let pd = &self.phase_decoder;
        let y = pd.trunk.dense.flops("phase_decoder.dense", s, r)?;
        let y = pd.trunk.subpixel.flops("phase_decoder.subpixel", y, r)?;
        let y = pd.trunk.norm_act.flops("phase_decoder", y, r);
        let o = pd.real.flops("phase_decoder.real", y, r)?;
        pd.imag.flops("phase_decoder.imag", y, r)?;
        r.elementwise("phase_decoder.atan2", FlopKind::Activation, (o[1] * o[2]) as u64, 1);
        Ok(rep)
    }
}
