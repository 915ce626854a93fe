use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fggsl_core::analysis::{
    learned_edge_audit, prop1_sweep, random_weighted_laplacian, response_csv, similarity_histogram,
    spectral_response_export, stability_probe, write_report, SimilarityHistogram,
};
use fggsl_core::dataset::{gen_synthetic, random_splits, save_raw, save_split, SyntheticSpec};
use fggsl_core::graph::{normalized_laplacian, DEGREE_EPS};
use fggsl_core::model::GraphInputs;
use fggsl_core::train::{mlp_baseline, run_ablation, train_all, RunResult};
use fggsl_core::{DatasetBundle, FgGslModel, TrainConfig};
use serde_json::json;

use crate::args::{AblateArgs, Analysis, AuditArgs, Cli, Command, GenArgs, RunArgs, SimilarityArgs, StabilityArgs};
use crate::manifest::RunManifest;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(&args),
        Command::Ablate(args) => ablate(&args),
        Command::Analyze(kind) => analyze(kind),
        Command::Gen(args) => gen(&args),
    }
}

fn resolve_config(args: &RunArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(variant) = args.variant {
        config.variant = variant;
    }
    if let Some(mode) = args.kernel_mode {
        config.kernel_mode = mode;
    }
    if let Some(candidate) = args.candidate {
        config.candidate = candidate;
    }
    if let Some(k) = args.parallel_splits {
        config.parallel_splits = k > 1;
    }
    config.validate()?;
    Ok(config)
}

/// `FGGSL_THREADS`, when set, caps every thread pool.
fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("FGGSL_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => bail!("FGGSL_THREADS must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(None),
    }
}

fn in_pool<T: Send>(requested: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = match (requested, thread_cap()?) {
        (Some(k), Some(cap)) => k.min(cap),
        (Some(k), None) => k,
        (None, Some(cap)) => cap,
        (None, None) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    Ok(pool.install(job))
}

fn load_bundle(dir: &Path, normalize: bool) -> Result<DatasetBundle> {
    DatasetBundle::load_dir(dir, normalize).with_context(|| format!("loading dataset {}", dir.display()))
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn train(args: &RunArgs) -> Result<()> {
    let config = resolve_config(args)?;
    let bundle = load_bundle(&args.data, config.normalize_features)?;
    let (result, models) = in_pool(args.parallel_splits, || train_all(&bundle, &config))??;
    create_out(&args.out)?;
    result.write(&args.out, "report")?;
    for (i, model) in models.iter().enumerate() {
        model.save_checkpoint(&args.out.join("checkpoints").join(format!("split_{i:02}.ckpt")))?;
    }
    RunManifest::new("train", &config, &bundle, &args.data, vec!["report.json".into(), "report.csv".into()])
        .write(&args.out)?;
    println!("{}", summary_line(&result));
    Ok(())
}

fn summary_line(r: &RunResult) -> String {
    format!(
        "{} {}: {:.4} ± {:.4} over {} splits",
        r.dataset,
        r.model,
        r.mean_test_acc,
        r.std_test_acc,
        r.splits.len()
    )
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let config = resolve_config(&args.run)?;
    let bundle = load_bundle(&args.run.data, config.normalize_features)?;
    let mut results = in_pool(args.run.parallel_splits, || run_ablation(&bundle, &config))??;
    if args.mlp {
        results.push(in_pool(args.run.parallel_splits, || mlp_baseline(&bundle, &config))??);
    }
    create_out(&args.run.out)?;
    let mut comparison = String::from("variant,split_id,test_acc,best_epoch,seconds\n");
    let mut reports = vec!["comparison.csv".to_string()];
    for r in &results {
        for s in &r.splits {
            writeln!(comparison, "{},{},{},{},{:.6}", r.model, s.split_id, s.test_acc, s.best_epoch, s.seconds)?;
        }
        let stem = format!("report_{}", r.model);
        r.write(&args.run.out, &stem)?;
        reports.push(format!("{stem}.json"));
        println!("{}", summary_line(r));
    }
    fs::write(args.run.out.join("comparison.csv"), comparison)?;
    RunManifest::new("ablate", &config, &bundle, &args.run.data, reports).write(&args.run.out)?;
    Ok(())
}

fn analyze(kind: Analysis) -> Result<()> {
    match kind {
        Analysis::Similarity(a) => similarity(&a),
        Analysis::Prop1(a) => {
            create_out(&a.out)?;
            let summary = prop1_sweep(a.trials, a.seed)?;
            let csv = format!(
                "trials,violations,max_ratio\n{},{},{}\n",
                summary.trials, summary.violations, summary.max_ratio
            );
            write_report(&a.out, "prop1", &csv, &json!({"kind": "prop1", "trials": a.trials, "seed": a.seed, "summary": summary}))?;
            println!("prop1: {} violations over {} trials (max lhs/rhs {:.4})", summary.violations, summary.trials, summary.max_ratio);
            Ok(())
        }
        Analysis::Stability(a) => stability(&a),
        Analysis::Response(a) => {
            create_out(&a.out)?;
            let rows = spectral_response_export(a.max_scale, a.kernel_mode, a.grid)?;
            let sidecar = json!({"kind": "response", "J": a.max_scale, "kernel_mode": a.kernel_mode, "grid_points": a.grid});
            write_report(&a.out, "response", &response_csv(&rows), &sidecar)?;
            println!("response: {} rows", rows.len());
            Ok(())
        }
        Analysis::Audit(a) => audit(&a),
    }
}

fn similarity(a: &SimilarityArgs) -> Result<()> {
    let bundle = load_bundle(&a.data, !a.raw_features)?;
    create_out(&a.out)?;
    let labels = bundle.graph.labels();
    let report = |stem: &str, source: String, hist: &SimilarityHistogram| -> Result<()> {
        let sidecar = json!({
            "kind": "similarity",
            "source": source,
            "dataset": bundle.name,
            "max_pairs": a.max_pairs,
            "bins": a.bins,
            "seed": a.seed,
            "histogram": hist,
        });
        write_report(&a.out, stem, &hist.to_csv(), &sidecar)?;
        println!(
            "{stem}: intra {:.4} inter {:.4} gap {:.4}",
            hist.intra_mean,
            hist.inter_mean,
            hist.gap()
        );
        Ok(())
    };
    let raw = similarity_histogram(bundle.graph.features(), labels, a.max_pairs, a.bins, a.seed)?;
    report("similarity_raw", "features".into(), &raw)?;
    if let Some(ckpt) = &a.checkpoint {
        let model = FgGslModel::load_checkpoint(ckpt)?;
        let inputs = GraphInputs::new(&bundle, a.candidate)?;
        let h = model.embeddings(&inputs)?;
        let emb = similarity_histogram(&h, labels, a.max_pairs, a.bins, a.seed)?;
        report("similarity_embedding", format!("embeddings of {}", ckpt.display()), &emb)?;
    }
    Ok(())
}

fn stability(a: &StabilityArgs) -> Result<()> {
    let (l, source) = match &a.data {
        Some(dir) => {
            let bundle = load_bundle(dir, true)?;
            (normalized_laplacian(bundle.graph.adjacency(), DEGREE_EPS)?, bundle.name)
        }
        None => (random_weighted_laplacian(a.n, a.density, a.seed)?, format!("random n={} density={}", a.n, a.density)),
    };
    create_out(&a.out)?;
    let mut csv = String::new();
    let mut slopes = Vec::new();
    let mut violations = 0;
    for (k, &j) in a.j.iter().enumerate() {
        let rep = in_pool(None, || stability_probe(&l, j, a.kernel_mode, a.kind.into(), &a.epsilons, a.trials, a.seed))??;
        let body = rep.to_csv();
        csv.push_str(if k == 0 { &body } else { body.split_once('\n').map_or("", |x| x.1) });
        violations += rep.violations();
        slopes.push(json!({"j": j, "slope": rep.slope, "violations": rep.violations()}));
        println!(
            "stability j={j}: {} violations over {} records, log-log slope {}",
            rep.violations(),
            rep.records.len(),
            rep.slope.map_or("n/a".into(), |s| format!("{s:.4}"))
        );
    }
    let sidecar = json!({
        "kind": "stability",
        "graph": source,
        "kernel_mode": a.kernel_mode,
        "bank": format!("{:?}", a.kind).to_lowercase(),
        "epsilons": a.epsilons,
        "trials": a.trials,
        "seed": a.seed,
        "eigenvector_convention": "ascending eigenvalues; each eigenvector signed so its first entry above 1e-12 in magnitude is positive",
        "per_scale": slopes,
        "violations": violations,
    });
    write_report(&a.out, "stability", &csv, &sidecar)?;
    Ok(())
}

fn audit(a: &AuditArgs) -> Result<()> {
    let bundle = load_bundle(&a.data, !a.raw_features)?;
    let model = FgGslModel::load_checkpoint(&a.checkpoint)?;
    let inputs = GraphInputs::new(&bundle, a.candidate)?;
    let (w_ho, w_ht) = model.edge_weights(&inputs)?;
    let audit = learned_edge_audit(w_ho.as_ref(), w_ht.as_ref(), bundle.graph.labels(), a.threshold)?;
    create_out(&a.out)?;
    let sidecar = json!({
        "kind": "audit",
        "checkpoint": a.checkpoint,
        "dataset": bundle.name,
        "candidate": a.candidate,
        "audit": audit,
    });
    write_report(&a.out, "audit", &audit.to_csv(), &sidecar)?;
    print!("{}", audit.to_csv());
    Ok(())
}

fn gen(a: &GenArgs) -> Result<()> {
    if !(a.train_frac > 0.0 && a.val_frac > 0.0 && a.train_frac + a.val_frac < 1.0) {
        bail!(
            "train_frac ({}) and val_frac ({}) must be positive and sum below 1",
            a.train_frac,
            a.val_frac
        );
    }
    let spec = SyntheticSpec {
        n: a.n,
        classes: a.classes,
        intra_p: a.intra_p,
        inter_p: a.inter_p,
        proto_noise: a.noise,
        feature_dim: a.feature_dim,
        seed: a.seed,
    };
    let syn = gen_synthetic(&spec)?;
    let splits = random_splits(a.n, a.splits, a.train_frac, a.val_frac, a.seed);
    let graph = syn.graph.with_splits(splits)?;
    create_out(&a.out)?;
    save_raw(&graph, &a.out.join("nodes.tsv"), &a.out.join("edges.tsv"))?;
    for (i, split) in graph.splits().iter().enumerate() {
        save_split(split, &a.out.join("splits").join(format!("split_{i}.txt")))?;
    }
    let sidecar = json!({"kind": "synthetic", "spec": spec, "splits": a.splits, "train_frac": a.train_frac, "val_frac": a.val_frac, "heterophily_ratio": syn.heterophily});
    fs::write(a.out.join("synthetic.json"), serde_json::to_string_pretty(&sidecar)?)?;
    match syn.heterophily {
        Some(h) => println!("heterophily_ratio {h}"),
        None => println!("heterophily_ratio undefined (no edges)"),
    }
    Ok(())
}
