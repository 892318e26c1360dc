//! Named parameters and weight tying.
//!
//! Every parameter has one canonical storage slot addressed by [`ParamId`]. A model
//! site (a dotted path such as `up0.block1.attn.mha.in_proj.weight`) resolves to a
//! slot; tying registers an extra site for an existing slot, so reads, writes and
//! gradient accumulation are shared by construction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{Array, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Array<T>,
    pub trainable: bool,
}

/// Result of [`ParamStore::tie`]: the canonical slot and every site that reads it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedHandle {
    pub canonical: ParamId,
    pub aliases: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    sites: BTreeMap<String, ParamId>,
    aliases: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), sites: BTreeMap::new(), aliases: BTreeMap::new() }
    }

    /// Registers a new canonical parameter under `name`.
    pub fn register(&mut self, name: &str, value: Array<T>) -> Result<ParamId> {
        if self.sites.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter { name: name.to_string(), value, trainable: true });
        self.sites.insert(name.to_string(), id);
        Ok(id)
    }

    /// Makes `site` an alias of `canonical`. `expected_shape` is the shape the site's
    /// consumer requires.
    pub fn tie(&mut self, canonical: ParamId, site: &str, expected_shape: &[usize]) -> Result<SharedHandle> {
        let have = self.get(canonical).value.shape().to_vec();
        if have != expected_shape {
            return Err(Error::Shape {
                op: "tie",
                detail: format!("site `{site}` expects {expected_shape:?}, canonical has {have:?}"),
            });
        }
        if self.sites.contains_key(site) {
            return Err(Error::Invalid(format!("site `{site}` is already bound")));
        }
        self.sites.insert(site.to_string(), canonical);
        self.aliases.insert(site.to_string(), canonical);
        Ok(self.handle(canonical))
    }

    pub fn handle(&self, canonical: ParamId) -> SharedHandle {
        SharedHandle {
            canonical,
            aliases: self
                .aliases
                .iter()
                .filter(|(_, &id)| id == canonical)
                .map(|(s, _)| s.clone())
                .collect(),
        }
    }

    pub fn resolve(&self, site: &str) -> Option<ParamId> {
        self.sites.get(site).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.params[id.0].value
    }

    /// Reads through a site path (canonical name or alias).
    pub fn read(&self, site: &str) -> Option<&Array<T>> {
        self.resolve(site).map(|id| self.value(id))
    }

    pub fn write(&mut self, site: &str, value: Array<T>) -> Result<()> {
        let id = self.resolve(site).ok_or_else(|| Error::Invalid(format!("unknown site `{site}`")))?;
        if value.shape() != self.value(id).shape() {
            return Err(Error::Shape { op: "write", detail: format!("site `{site}`") });
        }
        self.params[id.0].value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.params[id.0].trainable = on;
    }

    /// Canonical parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Alias site → canonical name, sorted by alias.
    pub fn tie_table(&self) -> Vec<(String, String)> {
        self.aliases.iter().map(|(a, id)| (a.clone(), self.params[id.0].name.clone())).collect()
    }

    /// Unique scalar count; aliases are not double-counted.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
            sites: self.sites.clone(),
            aliases: self.aliases.clone(),
        }
    }
}
