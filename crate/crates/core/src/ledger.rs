//! Exact multiply-accumulate bookkeeping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::LayerId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacKind {
    /// Dense linear layer evaluated in full.
    LinearFull,
    /// Low-rank increment on a cached step.
    LinearIncrement,
    /// `Q·Kᵀ` and `A·V` inside attention.
    AttentionNonlinear,
    /// Everything outside the cached blocks (embeddings, final head).
    Overhead,
}

/// Where a MAC charge was incurred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    Layer(LayerId),
    Attention { block: usize },
    Model,
}

impl Site {
    pub fn is_block(&self) -> bool {
        !matches!(self, Site::Model)
    }
}

/// MAC counts keyed by (sampler step position, site, kind).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacLedger {
    entries: BTreeMap<(usize, Site, MacKind), u64>,
}

impl MacLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, step: usize, site: Site, kind: MacKind, macs: u64) {
        *self.entries.entry((step, site, kind)).or_insert(0) += macs;
    }

    pub fn get(&self, step: usize, site: Site, kind: MacKind) -> u64 {
        self.entries.get(&(step, site, kind)).copied().unwrap_or(0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, Site, MacKind, u64)> + '_ {
        self.entries.iter().map(|(&(s, site, k), &v)| (s, site, k, v))
    }

    pub fn total(&self) -> u64 {
        self.entries.values().sum()
    }

    pub fn total_kind(&self, kind: MacKind) -> u64 {
        self.entries().filter(|e| e.2 == kind).map(|e| e.3).sum()
    }

    /// MACs spent inside transformer blocks (everything except overhead).
    pub fn block_total(&self) -> u64 {
        self.entries()
            .filter(|e| e.1.is_block())
            .map(|e| e.3)
            .sum()
    }

    pub fn step_total(&self, step: usize) -> u64 {
        self.entries().filter(|e| e.0 == step).map(|e| e.3).sum()
    }

    pub fn step_kind(&self, step: usize, kind: MacKind) -> u64 {
        self.entries()
            .filter(|e| e.0 == step && e.2 == kind)
            .map(|e| e.3)
            .sum()
    }

    pub fn merge(&mut self, other: &MacLedger) {
        for (k, v) in &other.entries {
            *self.entries.entry(*k).or_insert(0) += v;
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}
