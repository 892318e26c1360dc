//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated keys
//! are rejected; missing keys take the defaults below.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, RwsaPairing};
use crate::objectives::LossWeights;

/// Training-loop settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Samples per training segment.
    pub segment: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { segment: 30_600, batch: 8, lr: 5e-4, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

pub const KEYS: [&str; 25] = [
    "model.C",
    "model.N",
    "model.heads_bottleneck",
    "model.heads_other",
    "model.rwsa",
    "model.rwsa_pairing",
    "model.mha",
    "mamba.d_state",
    "mamba.d_conv",
    "mamba.expand",
    "stft.n_fft",
    "stft.win",
    "stft.hop",
    "compress.c",
    "mask.beta",
    "loss.w_time",
    "loss.w_mag",
    "loss.w_complex",
    "loss.w_phase",
    "loss.w_consistency",
    "loss.w_gan",
    "train.segment",
    "train.batch",
    "train.lr",
    "train.seed",
];

/// Keys that determine the network and therefore the weight layout.
pub const MODEL_KEYS: usize = 15;

fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Config { key: key.into(), msg: format!("cannot parse `{v}`") })
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config { key: key.into(), msg: format!("expected true or false, got `{v}`") }),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config { key: format!("line {}", lineno + 1), msg: format!("expected key=value, got `{line}`") });
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config { key: k.into(), msg: "given more than once".into() });
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config { key: path.display().to_string(), msg: e.to_string() })?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let l = &mut self.loss;
        let t = &mut self.train;
        match key {
            "model.C" => m.channels = num(key, v)?,
            "model.N" => m.blocks = num(key, v)?,
            "model.heads_bottleneck" => m.heads_bottleneck = num(key, v)?,
            "model.heads_other" => m.heads_other = num(key, v)?,
            "model.rwsa" => m.rwsa = flag(key, v)?,
            "model.rwsa_pairing" => {
                m.rwsa_pairing = RwsaPairing::parse(v)
                    .ok_or_else(|| Error::Config { key: key.into(), msg: format!("expected per_block or per_level, got `{v}`") })?
            }
            "model.mha" => m.mha = flag(key, v)?,
            "mamba.d_state" => m.mamba.d_state = num(key, v)?,
            "mamba.d_conv" => m.mamba.d_conv = num(key, v)?,
            "mamba.expand" => m.mamba.expand = num(key, v)?,
            "stft.n_fft" => m.stft.n_fft = num(key, v)?,
            "stft.win" => m.stft.win_length = num(key, v)?,
            "stft.hop" => m.stft.hop = num(key, v)?,
            "compress.c" => m.compress = num(key, v)?,
            "mask.beta" => m.beta = num(key, v)?,
            "loss.w_time" => l.time = num(key, v)?,
            "loss.w_mag" => l.mag = num(key, v)?,
            "loss.w_complex" => l.complex = num(key, v)?,
            "loss.w_phase" => l.phase = num(key, v)?,
            "loss.w_consistency" => l.consistency = num(key, v)?,
            "loss.w_gan" => {
                let w: f64 = num(key, v)?;
                if w != 0.0 {
                    return Err(Error::Config { key: key.into(), msg: "the adversarial term is not implemented; only 0 is accepted".into() });
                }
            }
            "train.segment" => t.segment = num(key, v)?,
            "train.batch" => t.batch = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            _ => return Err(Error::Config { key: key.into(), msg: "unknown key".into() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.segment < self.model.stft.hop {
            return Err(Error::Config { key: "train.segment".into(), msg: format!("{} samples is shorter than one hop", t.segment) });
        }
        if t.batch == 0 {
            return Err(Error::Config { key: "train.batch".into(), msg: "must be positive".into() });
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::Config { key: "train.lr".into(), msg: format!("{} must be finite and non-negative", t.lr) });
        }
        Ok(())
    }

    /// Every key with its effective value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, l, t) = (&self.model, &self.loss, &self.train);
        let values = [
            m.channels.to_string(),
            m.blocks.to_string(),
            m.heads_bottleneck.to_string(),
            m.heads_other.to_string(),
            m.rwsa.to_string(),
            m.rwsa_pairing.as_str().to_string(),
            m.mha.to_string(),
            m.mamba.d_state.to_string(),
            m.mamba.d_conv.to_string(),
            m.mamba.expand.to_string(),
            m.stft.n_fft.to_string(),
            m.stft.win_length.to_string(),
            m.stft.hop.to_string(),
            m.compress.to_string(),
            m.beta.to_string(),
            l.time.to_string(),
            l.mag.to_string(),
            l.complex.to_string(),
            l.phase.to_string(),
            l.consistency.to_string(),
            "0".to_string(),
            t.segment.to_string(),
            t.batch.to_string(),
            t.lr.to_string(),
            t.seed.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// `key=value` lines for the keys that shape the network.
pub fn model_echo(model: &ModelConfig) -> String {
    let run = RunConfig { model: *model, ..RunConfig::default() };
    let mut s = String::new();
    for (k, v) in run.entries().into_iter().take(MODEL_KEYS) {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model.channels = 24;
        cfg.model.rwsa_pairing = RwsaPairing::PerLevel;
        cfg.train.lr = 1.5e-3;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_repeated_and_malformed() {
        for bad in ["model.width=3", "model.C=16\nmodel.C=16", "model.C", "model.rwsa=maybe", "loss.w_gan=0.5"] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config { .. })), "{bad}");
        }
    }

    #[test]
    fn divisibility_is_checked_before_anything_runs() {
        let err = RunConfig::parse("model.C=10\nmodel.heads_other=4").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "model.heads_other"), "{err}");
    }
}
