//! Inputs shared by the benchmarks.

use dga_core::config::{ExperimentConfig, FeatureSource};
use dga_core::encoder::standard_normal;
use dga_core::synth::{synth_graph, tune_p_for_degree};
use dga_core::{EdgeSplit, SyntheticSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Four-factor random graph with `n` nodes and mean degree about 40, split
/// 60/20/20 with training-adjacency features.
pub fn synthetic_split(n: usize) -> (ExperimentConfig, EdgeSplit) {
    let p = tune_p_for_degree(n, 16, 4, 3e-5, 40.0).unwrap();
    let g = synth_graph(&SyntheticSpec {
        factors: 4,
        nodes: n,
        classes: 16,
        p,
        q: 3e-5,
        seed: 1,
    })
    .unwrap();
    let ec = ExperimentConfig {
        feature_source: FeatureSource::TrainAdjacency,
        val_frac: 0.2,
        test_frac: 0.2,
        ..Default::default()
    };
    let split = ec.split(&g).unwrap();
    (ec, split)
}

/// Rows of `k` unit-norm channel blocks of width `w`.
pub fn channel_embedding(n: usize, k: usize, w: usize, seed: u64) -> Tensor {
    standard_normal(n, k * w, &mut ChaCha8Rng::seed_from_u64(seed)).normalize_blocks(w)
}
