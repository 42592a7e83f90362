//! Shared fixtures for the benchmarks.

use infinet_core::pipeline::{load, Analysis};
use infinet_core::{PipelineOptions, BUNDLED_TRAFFIC_CONFIG};

/// Analysis of the bundled traffic network at truncation `n`.
pub fn traffic(n: usize) -> (Analysis, PipelineOptions) {
    let (spec, opts) = load(BUNDLED_TRAFFIC_CONFIG).expect("bundled config");
    (Analysis::new(spec, n).expect("analysis"), opts)
}
