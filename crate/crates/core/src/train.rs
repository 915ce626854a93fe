//! Adam, early-stopped training on one split, the multi-split protocol, the
//! ablation sweep and the MLP baseline.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{learned_edge_audit, EdgeAudit};
use crate::autodiff::{Gradients, ParamId, ParameterSet, Tape, Var};
use crate::dataset::{write_text, CandidateMode, DatasetBundle};
use crate::error::{Error, Result};
use crate::graph::Split;
use crate::matrix::{argmax, Matrix};
use crate::model::{
    FgGslModel, GraphInputs, KernelMode, LossBreakdown, ModelConfig, StructuralTargets, Variant,
};
use crate::rng;

/// Every knob of a training run. Unknown keys are rejected when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub max_scale: usize,
    pub mask_dim: usize,
    pub kernel_mode: KernelMode,
    pub variant: Variant,
    pub structural_targets: StructuralTargets,
    pub candidate: CandidateMode,
    pub normalize_features: bool,
    pub parallel_splits: bool,
    /// Learned weights above this count as edges in audits.
    pub edge_threshold: f64,
    pub mlp_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        TrainConfig {
            lr: 0.01,
            weight_decay: 5e-4,
            epochs: 500,
            patience: 100,
            seed: 0,
            alpha: model.alpha,
            beta: model.beta,
            max_scale: model.max_scale,
            mask_dim: model.mask_dim,
            kernel_mode: model.kernel_mode,
            variant: model.variant,
            structural_targets: model.structural_targets,
            candidate: CandidateMode::Full,
            normalize_features: true,
            parallel_splits: false,
            edge_threshold: 0.5,
            mlp_hidden: 64,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be at least 1"));
        }
        if self.patience > self.epochs {
            return Err(Error::validation(format!(
                "patience ({}) must not exceed epochs ({})",
                self.patience, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.edge_threshold) {
            return Err(Error::validation(format!(
                "edge_threshold must lie in [0, 1], got {}",
                self.edge_threshold
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::validation("mlp_hidden must be positive"));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            max_scale: self.max_scale,
            kernel_mode: self.kernel_mode,
            variant: self.variant,
            mask_dim: self.mask_dim,
            alpha: self.alpha,
            beta: self.beta,
            structural_targets: self.structural_targets,
        }
    }

    /// Seed for split `index`: `seed · 1000 + index`.
    pub fn split_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(index as u64)
    }
}

/// Adam with bias correction and decoupled weight decay on selected tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    decayed: Vec<bool>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParameterSet, lr: f64, weight_decay: f64, decayed: &[ParamId]) -> Self {
        let zeros = |p: &Matrix| Matrix::zeros(p.rows(), p.cols());
        let mut flags = vec![false; params.len()];
        for id in decayed {
            flags[id.index()] = true;
        }
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decayed: flags,
            m: params.iter().map(|(_, _, p)| zeros(p)).collect(),
            v: params.iter().map(|(_, _, p)| zeros(p)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient at Adam step {}", self.t + 1)));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let k = id.index();
            let g = grads.get(id).as_slice();
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            let decay = if self.decayed[k] { self.lr * self.weight_decay } else { 0.0 };
            let p = params.get_mut(id).as_mut_slice();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= self.lr * update + decay * p[i];
            }
        }
        Ok(())
    }
}

/// Fraction of `rows` whose arg-max prediction matches the one-hot label.
/// Ties go to the lowest class index.
pub fn evaluate(probs: &Matrix, labels: &Matrix, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::contract("accuracy over an empty index set"));
    }
    if let Some(&i) = rows.iter().find(|&&i| i >= probs.rows() || i >= labels.rows()) {
        return Err(Error::contract(format!("row {i} out of range")));
    }
    let hits = rows
        .iter()
        .filter(|&&i| argmax(probs.row(i)) == argmax(labels.row(i)))
        .count();
    Ok(hits as f64 / rows.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split_id: usize,
    pub test_acc: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub seconds: f64,
    /// Loss terms at the best epoch.
    pub loss: Option<LossBreakdown>,
    /// Loss terms of every epoch, before that epoch's update.
    pub loss_curve: Vec<EpochLoss>,
    /// Learned graphs of the restored model.
    pub audit: Option<EdgeAudit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub ce: f64,
    pub ho: f64,
    pub ht: f64,
    pub total: f64,
}

impl From<LossBreakdown> for EpochLoss {
    fn from(b: LossBreakdown) -> Self {
        EpochLoss {
            ce: b.ce,
            ho: b.ho,
            ht: b.ht,
            total: b.total,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub dataset: String,
    pub model: String,
    pub config: TrainConfig,
    pub splits: Vec<SplitResult>,
    pub mean_test_acc: f64,
    /// Population standard deviation across splits.
    pub std_test_acc: f64,
}

impl RunResult {
    pub fn new(dataset: impl Into<String>, model: impl Into<String>, config: &TrainConfig, splits: Vec<SplitResult>) -> Self {
        let accs: Vec<f64> = splits.iter().map(|s| s.test_acc).collect();
        let (mean, std) = mean_std(&accs);
        RunResult {
            dataset: dataset.into(),
            model: model.into(),
            config: config.clone(),
            splits,
            mean_test_acc: mean,
            std_test_acc: std,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split_id,test_acc,best_epoch,seconds\n");
        for s in &self.splits {
            out.push_str(&format!("{},{},{},{:.6}\n", s.split_id, s.test_acc, s.best_epoch, s.seconds));
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_text(&dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(self)?)?;
        write_text(&dir.join(format!("{stem}.csv")), &self.to_csv())
    }
}

/// Mean and population standard deviation. Both are zero for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

struct Fit {
    best_epoch: usize,
    epochs_run: usize,
    val_acc: f64,
    loss: Option<LossBreakdown>,
    curve: Vec<EpochLoss>,
}

struct Step {
    loss: Var,
    probs: Var,
    breakdown: Option<LossBreakdown>,
}

/// Shared early-stopping loop. Validation accuracy is measured on the
/// parameters before each update; the best parameters are restored at the end.
fn fit(
    params: &mut ParameterSet,
    adam: &mut Adam,
    config: &TrainConfig,
    labels: &Matrix,
    split: &Split,
    mut step: impl FnMut(&ParameterSet, &mut Tape) -> Result<Step>,
) -> Result<Fit> {
    let mut best = Fit {
        best_epoch: 0,
        epochs_run: 0,
        val_acc: f64::NEG_INFINITY,
        loss: None,
        curve: Vec::new(),
    };
    let mut best_params = params.clone();
    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let out = step(params, &mut tape)?;
        let loss = tape.value(out.loss).item();
        if !loss.is_finite() {
            return Err(Error::numeric(format!("loss became {loss} at epoch {epoch}")));
        }
        if let Some(b) = out.breakdown {
            best.curve.push(b.into());
        }
        let val_acc = evaluate(tape.value(out.probs), labels, &split.val)?;
        if val_acc > best.val_acc {
            best.val_acc = val_acc;
            best.best_epoch = epoch;
            best.loss = out.breakdown;
            best_params = params.clone();
        }
        let grads = tape.backward(out.loss, params)?;
        adam.step(params, &grads)?;
        best.epochs_run = epoch + 1;
        if epoch - best.best_epoch >= config.patience {
            break;
        }
    }
    *params = best_params;
    Ok(best)
}

/// Trains one model on one split and reports test accuracy at the best
/// validation epoch.
pub fn train_single_split(
    bundle: &DatasetBundle,
    inputs: &GraphInputs,
    config: &TrainConfig,
    split_id: usize,
) -> Result<(SplitResult, FgGslModel)> {
    config.validate()?;
    let split = split_at(bundle, split_id)?;
    let start = Instant::now();
    let g = &bundle.graph;
    let mut model = FgGslModel::new(
        config.model_config(),
        g.num_features(),
        g.num_classes(),
        config.split_seed(split_id),
    )?;
    let mut adam = Adam::new(&model.params, config.lr, config.weight_decay, &[model.classifier]);
    let rows: Arc<[usize]> = split.train.clone().into();
    let mut params = model.params.clone();
    let fitted = fit(&mut params, &mut adam, config, g.labels(), split, |p, tape| {
        let (vars, fwd) = model.total_loss_with(tape, p, inputs, &rows)?;
        Ok(Step {
            loss: vars.total,
            probs: fwd.probs,
            breakdown: Some(vars.breakdown(tape, config.alpha, config.beta)),
        })
    })?;
    model.params = params;
    let probs = model.predict(inputs)?;
    let (w_ho, w_ht) = model.edge_weights(inputs)?;
    let audit = learned_edge_audit(w_ho.as_ref(), w_ht.as_ref(), g.labels(), config.edge_threshold)?;
    let result = SplitResult {
        split_id,
        test_acc: evaluate(&probs, g.labels(), &split.test)?,
        train_acc: evaluate(&probs, g.labels(), &split.train)?,
        val_acc: fitted.val_acc,
        best_epoch: fitted.best_epoch,
        epochs_run: fitted.epochs_run,
        seconds: start.elapsed().as_secs_f64(),
        loss: fitted.loss,
        loss_curve: fitted.curve,
        audit: Some(audit),
    };
    log::info!(
        "{} split {split_id}: test {:.4} val {:.4} best epoch {}",
        bundle.name,
        result.test_acc,
        result.val_acc,
        result.best_epoch
    );
    Ok((result, model))
}

fn split_at(bundle: &DatasetBundle, split_id: usize) -> Result<&Split> {
    bundle.graph.splits().get(split_id).ok_or_else(|| {
        Error::validation(format!(
            "dataset {} has {} splits; split {split_id} does not exist",
            bundle.name,
            bundle.graph.splits().len()
        ))
    })
}

fn over_splits<T: Send>(
    bundle: &DatasetBundle,
    parallel: bool,
    run: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let count = bundle.graph.splits().len();
    if count == 0 {
        return Err(Error::validation(format!("dataset {} has no splits", bundle.name)));
    }
    if parallel {
        (0..count).into_par_iter().map(&run).collect()
    } else {
        (0..count).map(run).collect()
    }
}

/// Runs every split of the dataset. Split results do not depend on
/// `parallel_splits`.
pub fn run_protocol(bundle: &DatasetBundle, config: &TrainConfig) -> Result<RunResult> {
    train_all(bundle, config).map(|(r, _)| r)
}

/// [`run_protocol`], also returning the restored model of every split.
pub fn train_all(bundle: &DatasetBundle, config: &TrainConfig) -> Result<(RunResult, Vec<FgGslModel>)> {
    config.validate()?;
    let inputs = GraphInputs::new(bundle, config.candidate)?;
    let (splits, models) = over_splits(bundle, config.parallel_splits, |i| {
        train_single_split(bundle, &inputs, config, i)
    })?
    .into_iter()
    .unzip();
    Ok((RunResult::new(&bundle.name, config.variant.to_string(), config, splits), models))
}

/// The full model and its three ablations under one configuration.
pub fn run_ablation(bundle: &DatasetBundle, config: &TrainConfig) -> Result<Vec<RunResult>> {
    Variant::ALL
        .iter()
        .map(|&variant| run_protocol(bundle, &TrainConfig { variant, ..config.clone() }))
        .collect()
}

/// Two-layer perceptron `F → hidden (tanh) → C`, ignoring the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub params: ParameterSet,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new(num_features: usize, hidden: usize, num_classes: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut params = ParameterSet::new();
        let w1 = params.add("mlp.w1", rng::glorot_uniform(num_features, hidden, &mut r));
        let b1 = params.add("mlp.b1", Matrix::zeros(1, hidden));
        let w2 = params.add("mlp.w2", rng::glorot_uniform(hidden, num_classes, &mut r));
        let b2 = params.add("mlp.b2", Matrix::zeros(1, num_classes));
        Mlp { params, w1, b1, w2, b2 }
    }

    pub fn logits(&self, tape: &mut Tape, params: &ParameterSet, x: Var) -> Result<Var> {
        let w1 = tape.param(params, self.w1);
        let b1 = tape.param(params, self.b1);
        let w2 = tape.param(params, self.w2);
        let b2 = tape.param(params, self.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }

    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let logits = self.logits(&mut tape, &self.params, x)?;
        let probs = tape.softmax(logits);
        Ok(tape.value(probs).clone())
    }
}

/// Feature-only baseline over every split, with the same optimizer and early
/// stopping as the graph model.
pub fn mlp_baseline(bundle: &DatasetBundle, config: &TrainConfig) -> Result<RunResult> {
    config.validate()?;
    let g = &bundle.graph;
    let labels = Arc::new(g.labels().clone());
    let splits = over_splits(bundle, config.parallel_splits, |split_id| {
        let split = split_at(bundle, split_id)?;
        let start = Instant::now();
        let mut mlp = Mlp::new(g.num_features(), config.mlp_hidden, g.num_classes(), config.split_seed(split_id));
        let mut adam = Adam::new(&mlp.params, config.lr, config.weight_decay, &[mlp.w1, mlp.w2]);
        let rows: Arc<[usize]> = split.train.clone().into();
        let mut params = mlp.params.clone();
        let fitted = fit(&mut params, &mut adam, config, g.labels(), split, |p, tape| {
            let x = tape.constant(g.features().clone());
            let logits = mlp.logits(tape, p, x)?;
            let (loss, probs) = tape.softmax_cross_entropy(logits, labels.clone(), rows.clone())?;
            Ok(Step {
                loss,
                probs,
                breakdown: None,
            })
        })?;
        mlp.params = params;
        let probs = mlp.predict(g.features())?;
        Ok(SplitResult {
            split_id,
            test_acc: evaluate(&probs, g.labels(), &split.test)?,
            train_acc: evaluate(&probs, g.labels(), &split.train)?,
            val_acc: fitted.val_acc,
            best_epoch: fitted.best_epoch,
            epochs_run: fitted.epochs_run,
            seconds: start.elapsed().as_secs_f64(),
            loss: None,
            loss_curve: Vec::new(),
            audit: None,
        })
    })?;
    Ok(RunResult::new(&bundle.name, "mlp", config, splits))
}
