//! Shared fixtures for the benchmarks.

use iterseg_core::data::{Dataset, DatasetConfig};

/// A small default-resolution dataset; enough patches for a few minibatches.
pub fn bench_dataset() -> Dataset {
    Dataset::generate(
        &DatasetConfig {
            num_scenes: 12,
            ..DatasetConfig::default()
        },
        1,
    )
    .expect("default config is valid")
}
