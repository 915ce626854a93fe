//! Fixtures shared by the benchmarks.

use fggsl_core::dataset::{gen_synthetic, random_splits, SyntheticSpec};
use fggsl_core::model::GraphInputs;
use fggsl_core::{CandidateMode, DatasetBundle};

/// A heterophilic block-model graph of `n` nodes with one split.
pub fn synthetic_bundle(n: usize, feature_dim: usize) -> DatasetBundle {
    let spec = SyntheticSpec {
        n,
        feature_dim,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let graph = gen_synthetic(&spec)
        .expect("valid spec")
        .graph
        .with_splits(random_splits(n, 1, 0.6, 0.2, 11))
        .expect("valid splits");
    DatasetBundle::new(format!("synthetic-{n}"), graph, true).expect("valid bundle")
}

pub fn full_inputs(bundle: &DatasetBundle) -> GraphInputs {
    GraphInputs::new(bundle, CandidateMode::Full).expect("candidate graph")
}
