use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::seq::MambaConfig;

/// How down-path and up-path attention units are paired when sharing is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RwsaPairing {
    /// Down block `i` and up block `i` of a level share one unit.
    PerBlock,
    /// Every block of a level, down and up, shares the level's first unit.
    PerLevel,
}

impl RwsaPairing {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PerBlock => "per_block",
            Self::PerLevel => "per_level",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_block" => Some(Self::PerBlock),
            "per_level" => Some(Self::PerLevel),
            _ => None,
        }
    }
}

/// Hyperparameters of the network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Base width `C`; the levels run at `C`, `2C`, `4C`.
    pub channels: usize,
    /// Blocks per stack, `N`.
    pub blocks: usize,
    pub heads_bottleneck: usize,
    pub heads_other: usize,
    pub stft: StftConfig,
    /// Power-law compression exponent.
    pub compress: f64,
    /// Upper bound of the mask.
    pub beta: f64,
    pub mamba: MambaConfig,
    /// Resolution-wise attention sharing between the down and up paths.
    pub rwsa: bool,
    pub rwsa_pairing: RwsaPairing,
    /// Without attention every block is a plain TF-Mamba block.
    pub mha: bool,
    /// One attention unit serves both the time and the frequency path of a block.
    pub share_tf: bool,
    /// Tied units also share their layer norm.
    pub tie_norm: bool,
}

/// Number of U-Net resolutions (two downsamplings).
pub const LEVELS: usize = 3;

impl Default for ModelConfig {
    fn default() -> Self {
        Self::xs()
    }
}

impl ModelConfig {
    fn preset(channels: usize, blocks: usize) -> Self {
        Self {
            channels,
            blocks,
            heads_bottleneck: 8,
            heads_other: 4,
            stft: StftConfig::default(),
            compress: 0.3,
            beta: 2.0,
            mamba: MambaConfig::default(),
            rwsa: true,
            rwsa_pairing: RwsaPairing::PerBlock,
            mha: true,
            share_tf: true,
            tie_norm: true,
        }
    }

    /// `C = 16, N = 2`.
    pub fn xs() -> Self {
        Self::preset(16, 2)
    }

    /// `C = 16, N = 4`.
    pub fn s() -> Self {
        Self::preset(16, 4)
    }

    /// `C = 24, N = 4`.
    pub fn m() -> Self {
        Self::preset(24, 4)
    }

    /// Channel width at `level` (0 = full resolution).
    pub fn width(&self, level: usize) -> usize {
        self.channels << level
    }

    pub fn heads(&self, level: usize) -> usize {
        if level + 1 == LEVELS {
            self.heads_bottleneck
        } else {
            self.heads_other
        }
    }

    /// Frequency bins after the encoder halves them.
    pub fn latent_bins(&self) -> usize {
        self.stft.bins() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if self.channels == 0 {
            return bad("model.C", "must be positive".into());
        }
        if self.blocks == 0 {
            return bad("model.N", "must be positive".into());
        }
        if self.mha {
            for level in 0..LEVELS {
                let (w, h) = (self.width(level), self.heads(level));
                let key = if level + 1 == LEVELS { "model.heads_bottleneck" } else { "model.heads_other" };
                if h == 0 || w % h != 0 {
                    return bad(key, format!("width {w} at level {level} is not divisible by {h} heads"));
                }
            }
        }
        if let Err(e) = self.stft.validate() {
            return bad("stft.n_fft", e.to_string());
        }
        let scale = 1 << (LEVELS - 1);
        if self.stft.bins() % (2 * scale) != 0 {
            return bad(
                "stft.n_fft",
                format!("{} bins must be divisible by {} (encoder halving, then {} downsamplings)", self.stft.bins(), 2 * scale, LEVELS - 1),
            );
        }
        if !(self.compress > 0.0 && self.compress <= 1.0) {
            return bad("compress.c", format!("{} is outside (0, 1]", self.compress));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("mask.beta", format!("{} must be positive", self.beta));
        }
        let MambaConfig { d_state, d_conv, expand } = self.mamba;
        for (key, v) in [("mamba.d_state", d_state), ("mamba.d_conv", d_conv), ("mamba.expand", expand)] {
            if v == 0 {
                return bad(key, "must be positive".into());
            }
        }
        Ok(())
    }

    /// Frame count divisible by the total downsampling factor.
    pub fn frame_multiple(&self) -> usize {
        1 << (LEVELS - 1)
    }

    /// Length the forward pass works on for an input of `len` samples: the shortest
    /// `L' ≥ len` whose frame count is a multiple of [`frame_multiple`](Self::frame_multiple).
    pub fn padded_len(&self, len: usize) -> usize {
        let m = self.frame_multiple();
        let frames = self.stft.frames(len);
        if frames % m == 0 {
            return len;
        }
        let target = frames.div_ceil(m) * m;
        let mut l = len;
        while self.stft.frames(l) < target {
            l += 1;
        }
        l
    }
}
