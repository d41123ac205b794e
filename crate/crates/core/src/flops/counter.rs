use std::collections::BTreeMap;

/// Accumulated FLOP counts keyed by dotted block label
/// (e.g. `fuse2.block0.attn.score`).
///
/// A multiply-accumulate counts as 2 FLOPs; softmax, normalization and
/// GELU count 5 FLOPs per element; other elementwise ops count 1.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    counts: BTreeMap<String, u64>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, label: &str, flops: u64) {
        if flops == 0 {
            return;
        }
        *self.counts.entry(label.to_string()).or_insert(0) += flops;
    }

    /// Associative merge of another counter into this one.
    pub fn merge(&mut self, other: &FlopCounter) {
        for (k, v) in &other.counts {
            *self.counts.entry(k.clone()).or_insert(0) += v;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Sum over every label equal to `prefix` or nested under it.
    pub fn total_under(&self, prefix: &str) -> u64 {
        self.counts
            .iter()
            .filter(|(k, _)| label_is_under(k, prefix))
            .map(|(_, v)| v)
            .sum()
    }

    /// Sum over labels nested under `prefix` whose final segment is `leaf`.
    pub fn total_leaf(&self, prefix: &str, leaf: &str) -> u64 {
        self.counts
            .iter()
            .filter(|(k, _)| label_is_under(k, prefix) && k.rsplit('.').next() == Some(leaf))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn get(&self, label: &str) -> u64 {
        self.counts.get(label).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collapses labels to their first `depth` segments.
    pub fn rollup(&self, depth: usize) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.counts {
            let key: Vec<&str> = k.split('.').take(depth).collect();
            *out.entry(key.join(".")).or_insert(0) += v;
        }
        out
    }
}

fn label_is_under(label: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || label == prefix
        || (label.starts_with(prefix) && label.as_bytes().get(prefix.len()) == Some(&b'.'))
}
