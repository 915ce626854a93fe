use std::fs;

use fggsl_core::dataset::{gen_synthetic, random_splits, save_raw, save_split, SyntheticSpec};
use fggsl_core::model::{GraphInputs, Variant};
use fggsl_core::train::train_all;
use fggsl_core::{CandidateMode, DatasetBundle, Error, FgGslModel, TrainConfig};
use tempfile::tempdir;

fn synthetic(n: usize, splits: usize) -> DatasetBundle {
    let spec = SyntheticSpec {
        n,
        classes: 3,
        intra_p: 0.02,
        inter_p: 0.2,
        proto_noise: 1.0,
        feature_dim: 6,
        seed: 21,
    };
    let graph = gen_synthetic(&spec)
        .unwrap()
        .graph
        .with_splits(random_splits(n, splits, 0.6, 0.2, 21))
        .unwrap();
    DatasetBundle::new("syn", graph, true).unwrap()
}

#[test]
fn geom_gcn_layout_loads() {
    let dir = tempdir().unwrap();
    fs::write(
        dir.path().join("out1_node_feature_label.txt"),
        "node_id\tfeature\tlabel\n2\t0,1,1\t1\n0\t1,0,0\t0\n1\t1,1,0\t0\n3\t0,0,1\t2\n",
    )
    .unwrap();
    fs::write(dir.path().join("out1_graph_edges.txt"), "node_id\tnode_id\n0\t1\n1\t2\n2\t3\n3\t0\n").unwrap();
    fs::create_dir(dir.path().join("splits")).unwrap();
    fs::write(dir.path().join("splits/texas_split_0.6_0.2_0.txt"), "0 1\n2\n3\n").unwrap();

    let bundle = DatasetBundle::load_dir(dir.path(), true).unwrap();
    let g = &bundle.graph;
    assert_eq!((g.n(), g.num_features(), g.num_classes()), (4, 3, 3));
    assert_eq!(g.features().row(2), &[0.0, 0.5, 0.5]);
    assert_eq!(g.adjacency()[(0, 1)], 1.0);
    assert_eq!(g.adjacency()[(1, 0)], 1.0);
    assert_eq!(g.adjacency()[(0, 2)], 0.0);
    assert_eq!(g.splits()[0].test, vec![3]);
}

#[test]
fn saved_dataset_reloads_identically() {
    let bundle = synthetic(40, 2);
    let dir = tempdir().unwrap();
    save_raw(&bundle.graph, &dir.path().join("nodes.tsv"), &dir.path().join("edges.tsv")).unwrap();
    for (i, s) in bundle.graph.splits().iter().enumerate() {
        save_split(s, &dir.path().join("splits").join(format!("split_{i}.txt"))).unwrap();
    }
    let back = DatasetBundle::load_dir(dir.path(), true).unwrap();
    assert_eq!(back.graph.adjacency(), bundle.graph.adjacency());
    assert_eq!(back.graph.labels(), bundle.graph.labels());
    assert_eq!(back.graph.splits(), bundle.graph.splits());
    let diff = back
        .graph
        .features()
        .sub(bundle.graph.features())
        .unwrap()
        .max_abs();
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn overlapping_split_is_rejected() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("nodes.tsv"), "0\t1,0\t0\n1\t0,1\t1\n2\t1,1\t0\n").unwrap();
    fs::write(dir.path().join("edges.tsv"), "0\t1\n").unwrap();
    fs::create_dir(dir.path().join("splits")).unwrap();
    fs::write(dir.path().join("splits/split_0.txt"), "0 1\n1\n2\n").unwrap();
    assert!(matches!(DatasetBundle::load_dir(dir.path(), true), Err(Error::Validation(_))));
}

#[test]
fn trained_checkpoints_reproduce_predictions() {
    let bundle = synthetic(50, 2);
    let config = TrainConfig {
        epochs: 15,
        patience: 15,
        max_scale: 3,
        variant: Variant::Full,
        ..TrainConfig::default()
    };
    let (result, models) = train_all(&bundle, &config).unwrap();
    assert_eq!(result.splits.len(), 2);
    assert_eq!(models.len(), 2);
    assert!(result.splits.iter().all(|s| s.epochs_run <= 15 && s.best_epoch < s.epochs_run));

    let inputs = GraphInputs::new(&bundle, CandidateMode::Full).unwrap();
    let dir = tempdir().unwrap();
    for (i, model) in models.iter().enumerate() {
        let path = dir.path().join(format!("split_{i}.ckpt"));
        model.save_checkpoint(&path).unwrap();
        let back = FgGslModel::load_checkpoint(&path).unwrap();
        assert_eq!(back.predict(&inputs).unwrap(), model.predict(&inputs).unwrap());

        let probs = back.predict(&inputs).unwrap();
        let test = &bundle.graph.splits()[i].test;
        let acc = fggsl_core::train::evaluate(&probs, bundle.graph.labels(), test).unwrap();
        assert!((acc - result.splits[i].test_acc).abs() < 1e-12);
    }
}

#[test]
fn every_candidate_mode_trains() {
    let bundle = synthetic(40, 1);
    for candidate in [CandidateMode::Full, CandidateMode::Given, CandidateMode::Knn(4)] {
        let config = TrainConfig {
            epochs: 5,
            patience: 5,
            candidate,
            ..TrainConfig::default()
        };
        let (result, _) = train_all(&bundle, &config).unwrap();
        assert!(result.mean_test_acc.is_finite(), "{candidate}");
    }
}
