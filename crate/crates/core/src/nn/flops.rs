//! Analytic FLOP accounting. One multiply-accumulate counts as two FLOPs.

use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FlopKind {
    Conv,
    Linear,
    /// `QKᵀ` and `attn·V` products.
    AttentionScores,
    Softmax,
    /// Selective-scan state updates.
    Scan,
    Norm,
    Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsEntry {
    pub name: String,
    pub kind: FlopKind,
    pub flops: u64,
}

/// Per-layer FLOP counts for one forward pass over `seconds` of audio.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopsReport {
    pub seconds: f64,
    pub entries: Vec<FlopsEntry>,
}

impl FlopsReport {
    pub fn new(seconds: f64) -> Self {
        Self { seconds, entries: Vec::new() }
    }

    pub fn macs(&mut self, name: &str, kind: FlopKind, macs: u64) {
        self.push(name, kind, 2 * macs);
    }

    /// Elementwise work: `per_element` FLOPs for each of `elements`.
    pub fn elementwise(&mut self, name: &str, kind: FlopKind, elements: u64, per_element: u64) {
        self.push(name, kind, elements * per_element);
    }

    fn push(&mut self, name: &str, kind: FlopKind, flops: u64) {
        self.entries.push(FlopsEntry { name: name.to_string(), kind, flops });
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn by_kind(&self) -> BTreeMap<FlopKind, u64> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.kind).or_insert(0) += e.flops;
        }
        m
    }

    /// Totals grouped by the first `depth` dotted components of each entry name.
    pub fn by_module(&self, depth: usize) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            let key: Vec<&str> = e.name.split('.').take(depth).collect();
            *m.entry(key.join(".")).or_insert(0) += e.flops;
        }
        m
    }
}
