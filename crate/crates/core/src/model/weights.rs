//! Weight files: `RWSA` magic, format version, config echo, named f32 tensors and
//! the tie table. All integers are little-endian `u32`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::model_echo;
use crate::error::{Error, Result};
use crate::tensor::{Array, ParamStore, Real};

use super::config::ModelConfig;

pub const MAGIC: &[u8; 4] = b"RWSA";
pub const FORMAT_VERSION: u32 = 1;

/// Decoded file contents.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub config_echo: String,
    /// Canonical tensors in file order: `(name, shape, values)`.
    pub entries: Vec<(String, Vec<usize>, Vec<f32>)>,
    /// `(alias, canonical)`.
    pub ties: Vec<(String, String)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Weights(format!("{v} does not fit the format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Weights(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Weights("name is not UTF-8".into()))
    }
}

impl WeightFile {
    pub fn from_store<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Self {
        Self {
            config_echo: model_echo(cfg),
            entries: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec(), p.value.data().iter().map(|v| v.f64() as f32).collect()))
                .collect(),
            ties: store.tie_table(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION as usize)?;
        put_str(&mut out, &self.config_echo)?;
        put_u32(&mut out, self.entries.len())?;
        for (name, shape, values) in &self.entries {
            put_str(&mut out, name)?;
            put_u32(&mut out, shape.len())?;
            for &d in shape {
                put_u32(&mut out, d)?;
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.ties.len())?;
        for (alias, canonical) in &self.ties {
            put_str(&mut out, alias)?;
            put_str(&mut out, canonical)?;
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Weights("not a weight file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Weights(format!("unsupported format version {version}")));
        }
        let config_echo = r.string()?;
        let n = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let bytes = r.take(count.checked_mul(4).ok_or_else(|| Error::Weights(format!("`{name}` is too large")))?)?;
            let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            entries.push((name, shape, values));
        }
        let nt = r.u32()?;
        let ties = (0..nt).map(|_| Ok((r.string()?, r.string()?))).collect::<Result<Vec<_>>>()?;
        if r.pos != buf.len() {
            return Err(Error::Weights(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { config_echo, entries, ties })
    }

    /// Copies the values into `store`, which must come from building `cfg`. The config
    /// echo, every name and shape, and the tie table have to match exactly.
    pub fn apply<T: Real>(&self, cfg: &ModelConfig, store: &mut ParamStore<T>) -> Result<()> {
        let want = model_echo(cfg);
        if self.config_echo != want {
            let diff: Vec<String> = want
                .lines()
                .zip(self.config_echo.lines().chain(std::iter::repeat("<missing>")))
                .filter(|(a, b)| a != b)
                .map(|(a, b)| format!("config has {a}, file has {b}"))
                .collect();
            return Err(Error::Weights(format!("weights were saved for another model: {}", diff.join("; "))));
        }
        if self.ties != store.tie_table() {
            return Err(Error::Weights("tie table does not match the configured model".into()));
        }
        let by_name: BTreeMap<&str, (&Vec<usize>, &Vec<f32>)> =
            self.entries.iter().map(|(n, s, v)| (n.as_str(), (s, v))).collect();
        if by_name.len() != store.len() || self.entries.len() != store.len() {
            return Err(Error::Weights(format!("{} tensors in file, model has {}", self.entries.len(), store.len())));
        }
        let mut staged = Vec::with_capacity(store.len());
        for (id, p) in store.iter() {
            let (shape, values) =
                by_name.get(p.name.as_str()).ok_or_else(|| Error::Weights(format!("missing tensor `{}`", p.name)))?;
            if shape.as_slice() != p.value.shape() {
                return Err(Error::Weights(format!("`{}` has shape {shape:?}, model expects {:?}", p.name, p.value.shape())));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Weights(format!("`{}` holds non-finite values", p.name)));
            }
            staged.push((id, Array::from_parts(shape.to_vec(), values.iter().map(|v| T::c(*v as f64)).collect())));
        }
        for (id, a) in staged {
            *store.value_mut(id) = a;
        }
        Ok(())
    }
}

pub fn save_weights<T: Real>(path: impl AsRef<Path>, cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Vec<u8>> {
    let bytes = WeightFile::from_store(cfg, store).to_bytes()?;
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn load_weights<T: Real>(path: impl AsRef<Path>, cfg: &ModelConfig, store: &mut ParamStore<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
    WeightFile::from_bytes(&bytes)?.apply(cfg, store)
}
