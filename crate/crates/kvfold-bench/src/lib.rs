//! Deterministic fixtures shared by the benchmark targets.
//!
//! Everything is derived from seeded draws so run-to-run numbers compare
//! the same workloads.

use kvfold::{Dims, EngineConfig, KvDump, MergeStrategy};

/// A single-sequence dump at the given shape, filled with seeded
/// standard-normal values.
#[must_use]
pub fn bench_dump(layers: usize, tokens: usize, hidden: usize, seed: u64) -> KvDump {
    KvDump::seeded_gaussian(Dims::new(1, layers, tokens, hidden).unwrap(), seed)
}

/// Two deterministic token rows of width `hidden` (a merge kernel's input).
#[must_use]
pub fn vector_pair(hidden: usize, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let dump = bench_dump(1, 2, hidden, seed);
    let key = &dump.layers()[0].key;
    (key.row(0).to_vec(), key.row(1).to_vec())
}

/// Engine configuration with every layer paired, the default blend, and
/// the default retention fraction.
#[must_use]
pub fn all_paired_config(layers: usize) -> EngineConfig {
    let mut config = EngineConfig::new(layers);
    config.start_layer = 0;
    config.strategy = MergeStrategy::Slerp;
    config
}
