//! Mask networks, diffusion filter banks, the classifier and its losses.
//!
//! Logits are assembled as `Σ_j h_j(L) (X W_j)`, where `W_j` is the block of
//! classifier rows that reads scale `j`. This equals `H · W` with
//! `H = [h_2(L)X | … | h_J(L)X]` but never forms the `N × 2(J-1)F` matrix on
//! the tape; [`FgGslModel::embeddings`] materializes `H` when it is needed.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParameterSet, Tape, Var};
use crate::dataset::{candidate_graph, CandidateGraph, CandidateMode, DatasetBundle};
use crate::error::{Error, Result};
use crate::graph::{normalized_laplacian_var, DEGREE_EPS};
use crate::matrix::Matrix;
use crate::rng;

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!(
                        concat!("unknown ", stringify!($name), " {:?}; expected one of: ", $($text, " "),+),
                        s
                    )),
                }
            }
        }
    };
}

/// Which closed form the filter kernels follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    /// `t^{2^{j-1}} - t^{2^j}` with `t = 1 - λ/2` (low) or `t = λ/2` (high).
    #[default]
    #[serde(rename = "fig3")]
    Fig3,
    /// `(λ/2)^{2^{j-1}} - (1/2)^{2^j}` (low) and
    /// `(1-λ/2)^{2^{j-1}} - (1-λ/2)^{2^j}` (high), taken literally.
    Verbatim,
}

string_enum!(KernelMode { Fig3 => "fig3", Verbatim => "verbatim" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankKind {
    Low,
    High,
}

string_enum!(BankKind { Low => "low", High => "high" });

/// Model variant: the full model and the three ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Full,
    /// No masks: both banks run on the dataset's own graph.
    Nm,
    /// Homophilic mask with the low-pass bank only.
    Fbl,
    /// Heterophilic mask with the high-pass bank only.
    Fbh,
}

string_enum!(Variant { Full => "full", Nm => "nm", Fbl => "fbl", Fbh => "fbh" });

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::Nm, Variant::Fbl, Variant::Fbh];

    pub fn banks(self) -> &'static [BankKind] {
        match self {
            Variant::Full | Variant::Nm => &[BankKind::Low, BankKind::High],
            Variant::Fbl => &[BankKind::Low],
            Variant::Fbh => &[BankKind::High],
        }
    }
}

/// Which label vectors feed the structural losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuralTargets {
    /// Softmax predictions on every node.
    #[default]
    Predicted,
    /// True one-hot labels on training nodes, predictions elsewhere.
    TrainLabels,
}

/// One filter bank: scales `j = 2..=max_scale`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterBankSpec {
    pub max_scale: usize,
    pub mode: KernelMode,
    pub kind: BankKind,
}

impl FilterBankSpec {
    pub fn new(max_scale: usize, mode: KernelMode, kind: BankKind) -> Result<Self> {
        if max_scale < 2 {
            return Err(Error::contract(format!("max scale must be >= 2, got {max_scale}")));
        }
        Ok(FilterBankSpec { max_scale, mode, kind })
    }

    pub fn scales(&self) -> std::ops::RangeInclusive<usize> {
        2..=self.max_scale
    }

    pub fn len(&self) -> usize {
        self.max_scale - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Base operator of a kernel, as a function of the Laplacian.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Base {
    /// `I - L/2`
    LowShift,
    /// `L/2`
    HalfLaplacian,
}

/// How the second term of a kernel is formed.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Tail {
    /// `T^{2^j}`
    Power,
    /// `c · I`
    Constant(f64),
}

fn kernel_form(j: usize, mode: KernelMode, kind: BankKind) -> (Base, Tail) {
    match (mode, kind) {
        (KernelMode::Fig3, BankKind::Low) => (Base::LowShift, Tail::Power),
        (KernelMode::Fig3, BankKind::High) => (Base::HalfLaplacian, Tail::Power),
        (KernelMode::Verbatim, BankKind::Low) => {
            (Base::HalfLaplacian, Tail::Constant(0.5f64.powi(1 << j)))
        }
        (KernelMode::Verbatim, BankKind::High) => (Base::LowShift, Tail::Power),
    }
}

fn check_scale(j: usize) -> Result<()> {
    if j < 2 {
        return Err(Error::contract(format!("filter scale j must be >= 2, got {j}")));
    }
    if j > 30 {
        return Err(Error::contract(format!("filter scale j = {j} is too large")));
    }
    Ok(())
}

/// Spectral response `h^{(j)}(λ)` of one kernel.
pub fn kernel_value(j: usize, lambda: f64, mode: KernelMode, kind: BankKind) -> Result<f64> {
    check_scale(j)?;
    let (base, tail) = kernel_form(j, mode, kind);
    let t = match base {
        Base::LowShift => 1.0 - 0.5 * lambda,
        Base::HalfLaplacian => 0.5 * lambda,
    };
    let a = 1i32 << (j - 1);
    let head = t.powi(a);
    Ok(match tail {
        Tail::Power => head - t.powi(2 * a),
        Tail::Constant(c) => head - c,
    })
}

fn base_operator(tape: &mut Tape, l: Var, base: Base) -> Result<Var> {
    Ok(match base {
        Base::HalfLaplacian => tape.scale(l, 0.5),
        Base::LowShift => {
            let n = tape.value(l).rows();
            let eye = tape.constant(Matrix::identity(n));
            let half = tape.scale(l, 0.5);
            tape.sub(eye, half)?
        }
    })
}

/// Dense filter operators `h^{(j)}(L)` for every `j` in the bank, built from
/// `T, T², T⁴, …` by repeated squaring.
pub fn bank_operators(tape: &mut Tape, l: Var, bank: &FilterBankSpec) -> Result<Vec<Var>> {
    if !tape.value(l).is_square() {
        let s = tape.value(l).shape();
        return Err(Error::Dimension {
            op: "bank_operators",
            left: s,
            right: s,
        });
    }
    let mut out = Vec::with_capacity(bank.len());
    // Every scale of one bank shares its base operator.
    let (base, _) = kernel_form(2, bank.mode, bank.kind);
    let t = base_operator(tape, l, base)?;
    // powers[k] = T^{2^k}
    let mut powers = vec![t];
    let n = tape.value(l).rows();
    for j in bank.scales() {
        check_scale(j)?;
        let (_, tail) = kernel_form(j, bank.mode, bank.kind);
        let needed = match tail {
            Tail::Power => j,
            Tail::Constant(_) => j - 1,
        };
        while powers.len() <= needed {
            let last = *powers.last().unwrap();
            powers.push(tape.gram(last));
        }
        let head = powers[j - 1];
        let op = match tail {
            Tail::Power => tape.sub(head, powers[j])?,
            Tail::Constant(c) => {
                let shift = tape.constant(Matrix::identity(n).scale(c));
                tape.sub(head, shift)?
            }
        };
        out.push(op);
    }
    Ok(out)
}

/// `h^{(j)}(L) · X` for a single kernel.
pub fn filter_apply(tape: &mut Tape, l: Var, x: Var, j: usize, mode: KernelMode, kind: BankKind) -> Result<Var> {
    check_scale(j)?;
    let bank = FilterBankSpec {
        max_scale: j,
        mode,
        kind,
    };
    let ops = bank_operators(tape, l, &bank)?;
    tape.matmul(*ops.last().unwrap(), x)
}

/// Feature map `Φ(x) = tanh(x W + b)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskNet {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl MaskNet {
    pub fn init(params: &mut ParameterSet, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut rng::SeededRng) -> Self {
        MaskNet {
            weight: params.add(format!("{prefix}.weight"), rng::glorot_uniform(in_dim, out_dim, rng)),
            bias: params.add(format!("{prefix}.bias"), Matrix::zeros(1, out_dim)),
        }
    }

    /// `sigmoid(Φ(X) Φ(X)ᵀ) ⊙ A_f`. Symmetric bit for bit, zero wherever the
    /// candidate graph is zero (including the diagonal).
    pub fn mask_matrix(&self, tape: &mut Tape, params: &ParameterSet, x: Var, candidate: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let xw = tape.matmul(x, w)?;
        let pre = tape.add_row(xw, b)?;
        let z = tape.tanh(pre);
        let scores = tape.gram(z);
        let s = tape.sigmoid(scores);
        tape.hadamard(s, candidate)
    }
}

/// Architecture and loss weights. Everything a checkpoint needs to rebuild
/// the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub max_scale: usize,
    pub kernel_mode: KernelMode,
    pub variant: Variant,
    pub mask_dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub structural_targets: StructuralTargets,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            max_scale: 4,
            kernel_mode: KernelMode::Fig3,
            variant: Variant::Full,
            mask_dim: 16,
            alpha: 1.0,
            beta: 1.0,
            structural_targets: StructuralTargets::Predicted,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_scale < 2 {
            return Err(Error::validation(format!("max_scale must be >= 2, got {}", self.max_scale)));
        }
        if self.max_scale > 12 {
            return Err(Error::validation(format!("max_scale {} is unreasonably large", self.max_scale)));
        }
        if self.mask_dim == 0 {
            return Err(Error::validation("mask_dim must be positive"));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn bank(&self, kind: BankKind) -> FilterBankSpec {
        FilterBankSpec {
            max_scale: self.max_scale,
            mode: self.kernel_mode,
            kind,
        }
    }
}

/// Everything constant across epochs for one dataset and candidate graph.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    pub features: Matrix,
    pub labels: Arc<Matrix>,
    pub candidate: CandidateGraph,
    /// Binarized dataset adjacency, used by the no-mask variant.
    pub given: Matrix,
    /// Candidate edges `(i, j)`, `i < j`; the structural losses range over these.
    pub edges: Arc<[(usize, usize)]>,
}

impl GraphInputs {
    pub fn new(bundle: &DatasetBundle, mode: CandidateMode) -> Result<Self> {
        let g = &bundle.graph;
        let candidate = candidate_graph(g, mode)?;
        let edges: Arc<[(usize, usize)]> = candidate.edges().into();
        Ok(GraphInputs {
            features: g.features().clone(),
            labels: Arc::new(g.labels().clone()),
            given: g.adjacency().map(|w| if w > 0.0 { 1.0 } else { 0.0 }),
            candidate,
            edges,
        })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    pub probs: Var,
    /// Homophilic edge weights, when the variant has a low-pass bank.
    pub w_ho: Option<Var>,
    /// Heterophilic edge weights, when the variant has a high-pass bank.
    pub w_ht: Option<Var>,
}

/// Scalar loss components. `total = ce + alpha·ho + beta·ht`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ho: f64,
    pub ht: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub ho: Option<Var>,
    pub ht: Option<Var>,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape, alpha: f64, beta: f64) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        LossBreakdown {
            ce: tape.value(self.ce).item(),
            ho: get(self.ho),
            ht: get(self.ht),
            total: tape.value(self.total).item(),
            alpha,
            beta,
        }
    }
}

/// `mean over edges of w_ij · (1 - cos(ŷ_i, ŷ_j))`.
pub fn structural_loss_ho(tape: &mut Tape, w: Var, yhat: Var, edges: &Arc<[(usize, usize)]>) -> Result<Var> {
    structural_term(tape, w, yhat, edges, true)
}

/// `mean over edges of w_ij · cos(ŷ_i, ŷ_j)`.
pub fn structural_loss_ht(tape: &mut Tape, w: Var, yhat: Var, edges: &Arc<[(usize, usize)]>) -> Result<Var> {
    structural_term(tape, w, yhat, edges, false)
}

fn structural_term(tape: &mut Tape, w: Var, yhat: Var, edges: &Arc<[(usize, usize)]>, dissimilar: bool) -> Result<Var> {
    if edges.is_empty() {
        return Err(Error::contract("structural loss over an empty edge list"));
    }
    let cos = tape.cosine_pairs(yhat, yhat, edges.clone())?;
    let sim = if dissimilar { tape.affine(cos, -1.0, 1.0) } else { cos };
    let weights = tape.gather_pairs(w, edges.clone())?;
    let terms = tape.hadamard(weights, sim)?;
    tape.mean(terms)
}

/// The full model: two mask networks and a linear classifier over the banks.
#[derive(Clone, Debug, PartialEq)]
pub struct FgGslModel {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub mask_ho: MaskNet,
    pub mask_ht: MaskNet,
    pub classifier: ParamId,
    num_features: usize,
    num_classes: usize,
}

impl FgGslModel {
    pub const CLASSIFIER: &'static str = "classifier.weight";

    /// Glorot-uniform weights, zero biases.
    pub fn new(config: ModelConfig, num_features: usize, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let mut params = ParameterSet::new();
        let mask_ho = MaskNet::init(&mut params, "mask_ho", num_features, config.mask_dim, &mut r);
        let mask_ht = MaskNet::init(&mut params, "mask_ht", num_features, config.mask_dim, &mut r);
        let width = Self::classifier_rows(&config, num_features);
        let classifier = params.add(Self::CLASSIFIER, rng::glorot_uniform(width, num_classes, &mut r));
        Ok(FgGslModel {
            config,
            params,
            mask_ho,
            mask_ht,
            classifier,
            num_features,
            num_classes,
        })
    }

    /// Width of `H` for a variant: `(#banks)·(J-1)·F`.
    pub fn classifier_rows(config: &ModelConfig, num_features: usize) -> usize {
        config.variant.banks().len() * (config.max_scale - 1) * num_features
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check_inputs(&self, inputs: &GraphInputs) -> Result<()> {
        if inputs.features.cols() != self.num_features {
            return Err(Error::Dimension {
                op: "forward",
                left: inputs.features.shape(),
                right: (self.num_features, self.config.mask_dim),
            });
        }
        if inputs.labels.cols() != self.num_classes {
            return Err(Error::Dimension {
                op: "forward",
                left: inputs.labels.shape(),
                right: (self.num_features, self.num_classes),
            });
        }
        Ok(())
    }

    /// Edge weights and Laplacian for each active bank.
    fn graphs(&self, tape: &mut Tape, params: &ParameterSet, inputs: &GraphInputs, x: Var) -> Result<Vec<(BankKind, Var, Var)>> {
        let candidate = tape.constant(inputs.candidate.adjacency.clone());
        let mut out = Vec::new();
        for &kind in self.config.variant.banks() {
            let w = match self.config.variant {
                Variant::Nm => tape.constant(inputs.given.clone()),
                _ => {
                    let net = match kind {
                        BankKind::Low => &self.mask_ho,
                        BankKind::High => &self.mask_ht,
                    };
                    net.mask_matrix(tape, params, x, candidate)?
                }
            };
            let l = normalized_laplacian_var(tape, w, DEGREE_EPS)?;
            out.push((kind, w, l));
        }
        Ok(out)
    }

    /// Forward pass with an explicit parameter set (used by gradient checks).
    pub fn forward_with(&self, tape: &mut Tape, params: &ParameterSet, inputs: &GraphInputs) -> Result<Forward> {
        self.check_inputs(inputs)?;
        let f = self.num_features;
        let x = tape.constant(inputs.features.clone());
        let classifier = tape.param(params, self.classifier);
        let mut logits: Option<Var> = None;
        let mut w_ho = None;
        let mut w_ht = None;
        let mut block = 0;
        for (kind, w, l) in self.graphs(tape, params, inputs, x)? {
            match kind {
                BankKind::Low => w_ho = Some(w),
                BankKind::High => w_ht = Some(w),
            }
            for op in bank_operators(tape, l, &self.config.bank(kind))? {
                let wj = tape.slice_rows(classifier, block * f, f)?;
                let xw = tape.matmul(x, wj)?;
                let term = tape.matmul(op, xw)?;
                logits = Some(match logits {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
                block += 1;
            }
        }
        let logits = logits.expect("every variant has at least one bank");
        let probs = tape.softmax(logits);
        Ok(Forward {
            logits,
            probs,
            w_ho,
            w_ht,
        })
    }

    pub fn forward(&self, tape: &mut Tape, inputs: &GraphInputs) -> Result<Forward> {
        self.forward_with(tape, &self.params, inputs)
    }

    /// Cross-entropy on `train_rows` plus the weighted structural losses over
    /// all candidate edges.
    pub fn total_loss_with(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        inputs: &GraphInputs,
        train_rows: &Arc<[usize]>,
    ) -> Result<(LossVars, Forward)> {
        let fwd = self.forward_with(tape, params, inputs)?;
        let ce = tape.cross_entropy(fwd.logits, fwd.probs, inputs.labels.clone(), train_rows.clone())?;
        let targets = match self.config.structural_targets {
            StructuralTargets::Predicted => fwd.probs,
            StructuralTargets::TrainLabels => {
                let n = inputs.n();
                let c = self.num_classes;
                let mut keep = Matrix::filled(n, c, 1.0);
                let mut fixed = Matrix::zeros(n, c);
                for &i in train_rows.iter() {
                    keep.row_mut(i).fill(0.0);
                    fixed.row_mut(i).copy_from_slice(inputs.labels.row(i));
                }
                let keep = tape.constant(keep);
                let fixed = tape.constant(fixed);
                let kept = tape.hadamard(fwd.probs, keep)?;
                tape.add(kept, fixed)?
            }
        };
        let ho = match fwd.w_ho {
            Some(w) => Some(structural_loss_ho(tape, w, targets, &inputs.edges)?),
            None => None,
        };
        let ht = match fwd.w_ht {
            Some(w) => Some(structural_loss_ht(tape, w, targets, &inputs.edges)?),
            None => None,
        };
        let mut total = ce;
        if let Some(ho) = ho {
            let scaled = tape.scale(ho, self.config.alpha);
            total = tape.add(total, scaled)?;
        }
        if let Some(ht) = ht {
            let scaled = tape.scale(ht, self.config.beta);
            total = tape.add(total, scaled)?;
        }
        Ok((LossVars { total, ce, ho, ht }, fwd))
    }

    pub fn total_loss(&self, tape: &mut Tape, inputs: &GraphInputs, train_rows: &Arc<[usize]>) -> Result<(LossVars, Forward)> {
        self.total_loss_with(tape, &self.params, inputs, train_rows)
    }

    /// Class probabilities for every node.
    pub fn predict(&self, inputs: &GraphInputs) -> Result<Matrix> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, inputs)?;
        Ok(tape.value(fwd.probs).clone())
    }

    /// Learned edge weights `(w_ho, w_ht)` for the active banks.
    pub fn edge_weights(&self, inputs: &GraphInputs) -> Result<(Option<Matrix>, Option<Matrix>)> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, inputs)?;
        Ok((
            fwd.w_ho.map(|v| tape.value(v).clone()),
            fwd.w_ht.map(|v| tape.value(v).clone()),
        ))
    }

    /// The concatenated filter responses `H = [H_L | H_H]`.
    pub fn embeddings(&self, inputs: &GraphInputs) -> Result<Matrix> {
        self.check_inputs(inputs)?;
        let mut tape = Tape::new();
        let x = tape.constant(inputs.features.clone());
        let mut parts = Vec::new();
        for (kind, _, l) in self.graphs(&mut tape, &self.params, inputs, x)? {
            for op in bank_operators(&mut tape, l, &self.config.bank(kind))? {
                parts.push(tape.matmul(op, x)?);
            }
        }
        let h = tape.concat_cols(&parts)?;
        Ok(tape.value(h).clone())
    }

    /// Writes the binary checkpoint: magic `FGGSLCK1`, a little-endian `u32`
    /// header length and JSON header, a `u32` tensor count, then per tensor a
    /// `u32` name length, the UTF-8 name, `u64` rows, `u64` cols and the
    /// row-major `f64` values, all little-endian.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format: 1,
            config: self.config.clone(),
            num_features: self.num_features,
            num_classes: self.num_classes,
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, value) in self.params.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(value.rows() as u64).to_le_bytes());
            buf.extend_from_slice(&(value.cols() as u64).to_le_bytes());
            for v in value.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: msg.to_string(),
        };
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| bad("truncated magic"))? != CHECKPOINT_MAGIC {
            return Err(bad("not an FgGSL checkpoint"));
        }
        let header_len = cur.u32().ok_or_else(|| bad("truncated header length"))? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(cur.take(header_len).ok_or_else(|| bad("truncated header"))?)?;
        let mut model = FgGslModel::new(header.config, header.num_features, header.num_classes, 0)?;
        let count = cur.u32().ok_or_else(|| bad("truncated tensor count"))? as usize;
        if count != model.params.len() {
            return Err(bad("tensor count does not match the architecture"));
        }
        for _ in 0..count {
            let name_len = cur.u32().ok_or_else(|| bad("truncated name"))? as usize;
            let name = std::str::from_utf8(cur.take(name_len).ok_or_else(|| bad("truncated name"))?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rows = cur.u64().ok_or_else(|| bad("truncated shape"))? as usize;
            let cols = cur.u64().ok_or_else(|| bad("truncated shape"))? as usize;
            let raw = cur.take(rows * cols * 8).ok_or_else(|| bad("truncated tensor data"))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| bad(&format!("unexpected tensor {name}")))?;
            if model.params.get(id).shape() != (rows, cols) {
                return Err(bad(&format!("tensor {name} has shape {rows}x{cols}")));
            }
            *model.params.get_mut(id) = Matrix::from_vec(rows, cols, values)?;
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FGGSLCK1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: u32,
    config: ModelConfig,
    num_features: usize,
    num_classes: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_synthetic, random_splits, SyntheticSpec};
    use crate::graph::{normalized_laplacian, symmetric_eig};
    use proptest::prelude::*;

    fn small_bundle(n: usize, seed: u64) -> DatasetBundle {
        let spec = SyntheticSpec {
            n,
            classes: 2,
            intra_p: 0.2,
            inter_p: 0.6,
            proto_noise: 0.5,
            feature_dim: 3,
            seed,
        };
        let g = gen_synthetic(&spec).unwrap().graph;
        let g = g.with_splits(random_splits(n, 1, 0.5, 0.25, seed)).unwrap();
        DatasetBundle::new("tiny", g, false).unwrap()
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(kernel_value(2, 0.0, KernelMode::Fig3, BankKind::High).unwrap(), 0.0);
        assert_eq!(kernel_value(2, 1.0, KernelMode::Fig3, BankKind::Low).unwrap(), 0.1875);
        assert_eq!(kernel_value(2, 2.0, KernelMode::Verbatim, BankKind::Low).unwrap(), 0.9375);
        assert!(kernel_value(1, 0.5, KernelMode::Fig3, BankKind::Low).is_err());
    }

    #[test]
    fn low_bank_concentrates_on_low_frequencies() {
        for j in 2..=5 {
            let low: f64 = (0..100).map(|k| kernel_value(j, 0.01 + k as f64 * 0.0098, KernelMode::Fig3, BankKind::Low).unwrap()).sum();
            let high: f64 = (0..100).map(|k| kernel_value(j, 1.01 + k as f64 * 0.0098, KernelMode::Fig3, BankKind::Low).unwrap()).sum();
            assert!(low > high, "j={j}");
        }
    }

    #[test]
    fn edgeless_laplacian_zeroes_the_low_bank() {
        let mut tape = Tape::new();
        let l = tape.constant(Matrix::zeros(3, 3));
        let x = tape.constant(Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0], [4.0, 0.0]]));
        for j in 2..=4 {
            let y = filter_apply(&mut tape, l, x, j, KernelMode::Fig3, BankKind::Low).unwrap();
            assert_eq!(tape.value(y).max_abs(), 0.0);
        }
    }

    fn random_laplacian(n: usize, seed: u64) -> Matrix {
        let mut r = rng::seeded(seed);
        let raw = rng::standard_normal(n, n, &mut r);
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = raw[(i, j)].abs();
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
        normalized_laplacian(&w, DEGREE_EPS).unwrap()
    }

    #[test]
    fn filter_matches_spectral_theorem_n3() {
        let l = random_laplacian(3, 12);
        let mut r = rng::seeded(13);
        let x = rng::standard_normal(3, 2, &mut r);
        let eig = symmetric_eig(&l, 1e-14).unwrap();
        for mode in [KernelMode::Fig3, KernelMode::Verbatim] {
            for kind in [BankKind::Low, BankKind::High] {
                let want = eig
                    .apply_fn(|lam| kernel_value(2, lam, mode, kind).unwrap())
                    .matmul(&x)
                    .unwrap();
                let mut tape = Tape::new();
                let (lv, xv) = (tape.constant(l.clone()), tape.constant(x.clone()));
                let got = filter_apply(&mut tape, lv, xv, 2, mode, kind).unwrap();
                assert!(tape.value(got).sub(&want).unwrap().frobenius_norm() < 1e-8);
            }
        }
    }

    #[test]
    fn filter_matches_naive_powers() {
        let l = random_laplacian(6, 3);
        let mut r = rng::seeded(4);
        let x = rng::standard_normal(6, 3, &mut r);
        let t = Matrix::identity(6).sub(&l.scale(0.5)).unwrap();
        let mut p = Matrix::identity(6);
        let mut powers = vec![p.clone()];
        for _ in 0..8 {
            p = p.matmul(&t).unwrap();
            powers.push(p.clone());
        }
        let want = powers[4].sub(&powers[8]).unwrap().matmul(&x).unwrap();
        let mut tape = Tape::new();
        let (lv, xv) = (tape.constant(l), tape.constant(x));
        let got = filter_apply(&mut tape, lv, xv, 3, KernelMode::Fig3, BankKind::Low).unwrap();
        assert!(tape.value(got).sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn mask_examples() {
        let mut params = ParameterSet::new();
        let net = MaskNet {
            weight: params.add("w", Matrix::identity(2)),
            bias: params.add("b", Matrix::zeros(1, 2)),
        };
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::identity(2));
        let full = tape.constant(Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
        let m = net.mask_matrix(&mut tape, &params, x, full).unwrap();
        assert_eq!(tape.value(m)[(0, 1)], 0.5);
        assert_eq!(tape.value(m)[(0, 0)], 0.0);

        let none = tape.constant(Matrix::zeros(2, 2));
        let m = net.mask_matrix(&mut tape, &params, x, none).unwrap();
        assert_eq!(tape.value(m).max_abs(), 0.0);
    }

    #[test]
    fn forward_shapes() {
        let bundle = small_bundle(5, 1);
        let inputs = GraphInputs::new(&bundle, CandidateMode::Full).unwrap();
        let config = ModelConfig {
            max_scale: 3,
            ..Default::default()
        };
        let model = FgGslModel::new(config.clone(), 3, 2, 0).unwrap();
        assert_eq!(model.embeddings(&inputs).unwrap().shape(), (5, 12));
        let probs = model.predict(&inputs).unwrap();
        assert_eq!(probs.shape(), (5, 2));
        for i in 0..5 {
            assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let fbl = FgGslModel::new(ModelConfig { variant: Variant::Fbl, ..config }, 3, 2, 0).unwrap();
        assert_eq!(fbl.embeddings(&inputs).unwrap().shape(), (5, 6));
        assert_eq!(fbl.params.get(fbl.classifier).shape(), (6, 2));
    }

    #[test]
    fn reassociated_logits_equal_embedding_product() {
        let bundle = small_bundle(7, 2);
        let inputs = GraphInputs::new(&bundle, CandidateMode::Full).unwrap();
        for variant in Variant::ALL {
            let model = FgGslModel::new(ModelConfig { variant, ..Default::default() }, 3, 2, 9).unwrap();
            let h = model.embeddings(&inputs).unwrap();
            let logits = h.matmul(model.params.get(model.classifier)).unwrap();
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &inputs).unwrap();
            assert!(tape.value(fwd.logits).sub(&logits).unwrap().max_abs() < 1e-12, "{variant}");
        }
    }

    #[test]
    fn structural_loss_examples() {
        let edges: Arc<[(usize, usize)]> = Arc::from(vec![(0, 1)]);
        let mut tape = Tape::new();
        let w = tape.constant(Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
        let orth = tape.constant(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let same = tape.constant(Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]));
        let ho = structural_loss_ho(&mut tape, w, orth, &edges).unwrap();
        assert_eq!(tape.value(ho).item(), 1.0);
        let ht = structural_loss_ht(&mut tape, w, same, &edges).unwrap();
        assert_eq!(tape.value(ht).item(), 1.0);
        let ht = structural_loss_ht(&mut tape, w, orth, &edges).unwrap();
        assert_eq!(tape.value(ht).item(), 0.0);

        let zero = tape.constant(Matrix::zeros(2, 2));
        let ho = structural_loss_ho(&mut tape, zero, orth, &edges).unwrap();
        assert_eq!(tape.value(ho).item(), 0.0);
        let ht = structural_loss_ht(&mut tape, zero, same, &edges).unwrap();
        assert_eq!(tape.value(ht).item(), 0.0);

        let uniform = tape.constant(Matrix::filled(2, 2, 0.5));
        let ho = structural_loss_ho(&mut tape, w, uniform, &edges).unwrap();
        assert!(tape.value(ho).item().abs() < 1e-15);

        let empty: Arc<[(usize, usize)]> = Arc::from(Vec::new());
        assert!(structural_loss_ho(&mut tape, w, orth, &empty).is_err());
        assert!(structural_loss_ht(&mut tape, w, orth, &empty).is_err());
    }

    #[test]
    fn zero_weights_reduce_total_to_cross_entropy() {
        let bundle = small_bundle(6, 3);
        let inputs = GraphInputs::new(&bundle, CandidateMode::Full).unwrap();
        let model = FgGslModel::new(
            ModelConfig {
                alpha: 0.0,
                beta: 0.0,
                max_scale: 2,
                ..Default::default()
            },
            3,
            2,
            1,
        )
        .unwrap();
        let rows: Arc<[usize]> = bundle.graph.splits()[0].train.clone().into();
        let mut tape = Tape::new();
        let (vars, _) = model.total_loss(&mut tape, &inputs, &rows).unwrap();
        let b = vars.breakdown(&tape, 0.0, 0.0);
        assert_eq!(b.total, b.ce);
        assert!(b.ho >= 0.0 && b.ht >= 0.0);
    }

    #[test]
    fn nm_ignores_mask_parameters() {
        let bundle = small_bundle(8, 4);
        let inputs = GraphInputs::new(&bundle, CandidateMode::Full).unwrap();
        let model = FgGslModel::new(ModelConfig { variant: Variant::Nm, ..Default::default() }, 3, 2, 5).unwrap();
        let before = model.predict(&inputs).unwrap();
        let mut zeroed = model.clone();
        for net in [zeroed.mask_ho, zeroed.mask_ht] {
            for id in [net.weight, net.bias] {
                let shape = zeroed.params.get(id).shape();
                *zeroed.params.get_mut(id) = Matrix::zeros(shape.0, shape.1);
            }
        }
        assert_eq!(zeroed.predict(&inputs).unwrap(), before);
    }

    #[test]
    fn six_node_gradient_matches_finite_differences() {
        let bundle = small_bundle(6, 6);
        let inputs = GraphInputs::new(&bundle, CandidateMode::Full).unwrap();
        let model = FgGslModel::new(ModelConfig { max_scale: 3, mask_dim: 3, ..Default::default() }, 3, 2, 2).unwrap();
        let rows: Arc<[usize]> = bundle.graph.splits()[0].train.clone().into();
        let report = crate::autodiff::grad_check(&model.params, 1e-5, |p, tape| {
            Ok(model.total_loss_with(tape, p, &inputs, &rows)?.0.total)
        })
        .unwrap();
        assert!(report.max_relative_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = FgGslModel::new(ModelConfig { variant: Variant::Fbh, ..Default::default() }, 4, 3, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save_checkpoint(&path).unwrap();
        let back = FgGslModel::load_checkpoint(&path).unwrap();
        assert_eq!(back, model);

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(FgGslModel::load_checkpoint(&path).is_err());
    }

    #[test]
    fn enum_strings() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("verbatim".parse::<KernelMode>().unwrap(), KernelMode::Verbatim);
        assert!("fig4".parse::<KernelMode>().is_err());
        assert_eq!(serde_json::to_string(&KernelMode::Fig3).unwrap(), "\"fig3\"");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn bank_telescopes(lambda in 0.0f64..=2.0, max_scale in 2usize..7) {
            for kind in [BankKind::Low, BankKind::High] {
                let t = match kind { BankKind::Low => 1.0 - lambda / 2.0, BankKind::High => lambda / 2.0 };
                let total: f64 = (2..=max_scale).map(|j| kernel_value(j, lambda, KernelMode::Fig3, kind).unwrap()).sum();
                let want = t.powi(2) - t.powi(1 << max_scale);
                prop_assert!((total - want).abs() <= 1e-12);
            }
        }

        #[test]
        fn masks_are_exactly_symmetric(seed in 0u64..500) {
            let bundle = small_bundle(9, seed);
            let inputs = GraphInputs::new(&bundle, CandidateMode::Full).unwrap();
            let model = FgGslModel::new(ModelConfig::default(), 3, 2, seed).unwrap();
            let (ho, ht) = model.edge_weights(&inputs).unwrap();
            for m in [ho.unwrap(), ht.unwrap()] {
                prop_assert_eq!(m.asymmetry(), 0.0);
                prop_assert!((0..9).all(|i| m[(i, i)] == 0.0));
                prop_assert!(m.as_slice().iter().all(|&w| (0.0..=1.0).contains(&w)));
            }
        }

        #[test]
        fn forward_is_permutation_equivariant(seed in 0u64..200) {
            let bundle = small_bundle(7, seed);
            let model = FgGslModel::new(ModelConfig { max_scale: 3, ..Default::default() }, 3, 2, seed).unwrap();
            let inputs = GraphInputs::new(&bundle, CandidateMode::Given).unwrap();
            let base = model.predict(&inputs).unwrap();

            let mut r = rng::seeded(seed);
            let mut perm: Vec<usize> = (0..7).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut r);
            let permute_sq = |m: &Matrix| {
                let mut out = Matrix::zeros(7, 7);
                for i in 0..7 { for j in 0..7 { out[(i, j)] = m[(perm[i], perm[j])]; } }
                out
            };
            let mut p_inputs = inputs.clone();
            p_inputs.features = inputs.features.select_rows(&perm);
            p_inputs.labels = Arc::new(inputs.labels.select_rows(&perm));
            p_inputs.given = permute_sq(&inputs.given);
            p_inputs.candidate.adjacency = permute_sq(&inputs.candidate.adjacency);
            p_inputs.edges = p_inputs.candidate.edges().into();
            let permuted = model.predict(&p_inputs).unwrap();
            prop_assert!(permuted.sub(&base.select_rows(&perm)).unwrap().max_abs() < 1e-12);
        }
    }
}
