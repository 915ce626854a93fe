//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough information to produce
//! vector-Jacobian products later. [`Tape::backward`] consumes the tape, walks
//! it in reverse once, and returns one gradient per entry of the
//! [`ParameterSet`] the parameters were drawn from.
//!
//! Nodes that do not depend on any parameter are marked untracked and never
//! receive gradients, so constant inputs (features, candidate masks, targets)
//! cost nothing on the way back.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a tensor in a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(k, (n, v))| (ParamId(k), n.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// One gradient per parameter, in [`ParameterSet`] order. Parameters that
/// never reached the loss get zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().map(|(k, g)| (ParamId(k), g))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Hadamard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    /// `1 / sqrt(max(x, eps))`; the gradient is zero where the clamp is active.
    RsqrtClamped(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Gram(Var),
    Transpose(Var),
    Binary(Elementwise, Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    Act(Activation, Var),
    RowSums(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        probs: Var,
        targets: Arc<Matrix>,
        rows: Arc<[usize]>,
    },
    CosinePairs {
        a: Var,
        b: Var,
        pairs: Arc<[(usize, usize)]>,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
    },
    GatherPairs(Var, Arc<[(usize, usize)]>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Dimension {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked leaf bound to a parameter; gradients flow back to `id`.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        self.push(params.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), t))
    }

    /// `z · zᵀ`, exactly symmetric.
    pub fn gram(&mut self, z: Var) -> Var {
        let value = self.value(z).gram();
        let t = self.tracked(&[z]);
        self.push(value, Op::Gram(z), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(&[a]);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = match op {
            Elementwise::Add => va.add(vb),
            Elementwise::Sub => va.sub(vb),
            Elementwise::Hadamard => va.hadamard(vb),
        }?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Binary(op, a, b), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Hadamard, a, b)
    }

    /// `scale · a + shift`, entrywise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        let t = self.tracked(&[a]);
        self.push(value, Op::Affine(a, scale), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    /// Adds the `1 x cols` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(dim_err("add_row", va, vr));
        }
        let mut value = va.clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(vr.as_slice()) {
                *x += b;
            }
        }
        let t = self.tracked(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), t))
    }

    pub fn activation(&mut self, act: Activation, a: Var) -> Var {
        let value = match act {
            Activation::Sigmoid => self.value(a).map(sigmoid),
            Activation::Tanh => self.value(a).map(f64::tanh),
            Activation::RsqrtClamped(eps) => self.value(a).map(|x| 1.0 / x.max(eps).sqrt()),
        };
        let t = self.tracked(&[a]);
        self.push(value, Op::Act(act, a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(Activation::Tanh, a)
    }

    pub fn rsqrt_clamped(&mut self, a: Var, eps: f64) -> Var {
        self.activation(Activation::RsqrtClamped(eps), a)
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).row_sums();
        let t = self.tracked(&[a]);
        self.push(value, Op::RowSums(a), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let t = self.tracked(&[a]);
        self.push(value, Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let value = Matrix::scalar(va.sum() / va.len() as f64);
        let t = self.tracked(&[a]);
        Ok(self.push(value, Op::Mean(a), t))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one part"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(dim_err("concat_cols", self.value(*first), v));
            }
            cols += v.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            let out = value.row_mut(i);
            for p in parts {
                let src = self.nodes[p.0].value.row(i);
                out[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let t = self.tracked(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), t))
    }

    /// Rows `start .. start + count` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let va = self.value(a);
        if start + count > va.rows() {
            return Err(Error::contract(format!(
                "row slice {start}..{} out of range for {} rows",
                start + count,
                va.rows()
            )));
        }
        let idx: Vec<usize> = (start..start + count).collect();
        let value = va.select_rows(&idx);
        let t = self.tracked(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), t))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, logits: Var) -> Var {
        let value = softmax_rows(self.value(logits));
        let t = self.tracked(&[logits]);
        self.push(value, Op::Softmax(logits), t)
    }

    /// Mean cross-entropy of `logits` against one-hot `targets` over `rows`,
    /// together with the softmax of every row.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: Arc<Matrix>,
        rows: Arc<[usize]>,
    ) -> Result<(Var, Var)> {
        let probs = self.softmax(logits);
        let loss = self.cross_entropy(logits, probs, targets, rows)?;
        Ok((loss, probs))
    }

    /// Cross-entropy for logits whose softmax `probs` is already on the tape.
    ///
    /// The loss is evaluated with log-sum-exp and differentiated directly with
    /// respect to the logits, never through a log of probabilities.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        probs: Var,
        targets: Arc<Matrix>,
        rows: Arc<[usize]>,
    ) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape() != targets.shape() {
            return Err(dim_err("cross_entropy", vl, &targets));
        }
        if self.value(probs).shape() != vl.shape() {
            return Err(dim_err("cross_entropy", vl, self.value(probs)));
        }
        if rows.is_empty() {
            return Err(Error::contract("cross-entropy over an empty row set"));
        }
        let mut total = 0.0;
        for &i in rows.iter() {
            if i >= vl.rows() {
                return Err(Error::contract(format!(
                    "row {i} out of range for {} rows",
                    vl.rows()
                )));
            }
            let z = vl.row(i);
            let y = targets.row(i);
            if (y.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("target row {i} does not sum to 1")));
            }
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        }
        let loss = Matrix::scalar(total / rows.len() as f64);
        let t = self.tracked(&[logits]);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                rows,
            },
            t,
        ))
    }

    /// Cosine similarity between row `i` of `a` and row `j` of `b` for each
    /// `(i, j)` in `pairs`, as a `pairs.len() x 1` column.
    pub fn cosine_pairs(&mut self, a: Var, b: Var, pairs: Arc<[(usize, usize)]>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(dim_err("cosine_pairs", va, vb));
        }
        let norms_a = row_norms(va);
        let norms_b = row_norms(vb);
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs.iter() {
            if i >= va.rows() || j >= vb.rows() {
                return Err(Error::contract(format!("pair ({i}, {j}) out of range")));
            }
            if norms_a[i] == 0.0 {
                return Err(Error::contract(format!("row {i} has zero norm")));
            }
            if norms_b[j] == 0.0 {
                return Err(Error::contract(format!("row {j} has zero norm")));
            }
            let dot: f64 = va.row(i).iter().zip(vb.row(j)).map(|(x, y)| x * y).sum();
            out.push(dot / (norms_a[i] * norms_b[j]));
        }
        let value = Matrix::column(&out);
        let t = self.tracked(&[a, b]);
        Ok(self.push(
            value,
            Op::CosinePairs {
                a,
                b,
                pairs,
                norms_a,
                norms_b,
            },
            t,
        ))
    }

    /// Entries `a[i, j]` for each pair, as a column.
    pub fn gather_pairs(&mut self, a: Var, pairs: Arc<[(usize, usize)]>) -> Result<Var> {
        let va = self.value(a);
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs.iter() {
            if i >= va.rows() || j >= va.cols() {
                return Err(Error::contract(format!("pair ({i}, {j}) out of range")));
            }
            out.push(va[(i, j)]);
        }
        let value = Matrix::column(&out);
        let t = self.tracked(&[a]);
        Ok(self.push(value, Op::GatherPairs(a, pairs), t))
    }

    /// Propagates `d loss` back to every parameter leaf and consumes the tape.
    pub fn backward(mut self, loss: Var, params: &ParameterSet) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Matrix> = params
            .values
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        let mut adj: Vec<Option<Matrix>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Matrix::scalar(1.0));
        self.nodes.truncate(loss.0 + 1);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].tracked {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |v: Var, contrib: Matrix| {
                if nodes[v.0].tracked {
                    match &mut adj[v.0] {
                        Some(acc) => acc.accumulate(&contrib),
                        slot => *slot = Some(contrib),
                    }
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            let out = &nodes[idx].value;
            match &nodes[idx].op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if grads[id.0].shape() != g.shape() {
                        return Err(dim_err("backward", &grads[id.0], &g));
                    }
                    grads[id.0].accumulate(&g);
                }
                Op::MatMul(a, b) => {
                    if nodes[a.0].tracked {
                        send(*a, g.matmul_t(val(*b))?);
                    }
                    if nodes[b.0].tracked {
                        send(*b, val(*a).t_matmul(&g)?);
                    }
                }
                Op::Gram(z) => {
                    let sym = g.add(&g.transpose())?;
                    send(*z, sym.matmul(val(*z))?);
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Binary(kind, a, b) => match kind {
                    Elementwise::Add => {
                        send(*a, g.clone());
                        send(*b, g);
                    }
                    Elementwise::Sub => {
                        send(*a, g.clone());
                        send(*b, g.scale(-1.0));
                    }
                    Elementwise::Hadamard => {
                        if nodes[a.0].tracked {
                            send(*a, g.hadamard(val(*b))?);
                        }
                        if nodes[b.0].tracked {
                            send(*b, g.hadamard(val(*a))?);
                        }
                    }
                },
                Op::Affine(a, scale) => send(*a, g.scale(*scale)),
                Op::AddRow(a, row) => {
                    let mut col_sums = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (s, x) in col_sums.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *s += x;
                        }
                    }
                    send(*row, col_sums);
                    send(*a, g);
                }
                Op::Act(act, a) => {
                    let local = match act {
                        Activation::Sigmoid => out.map(|s| s * (1.0 - s)),
                        Activation::Tanh => out.map(|y| 1.0 - y * y),
                        Activation::RsqrtClamped(eps) => {
                            val(*a).zip_map(out, |x, y| if x > *eps { -0.5 * y * y * y } else { 0.0 })
                        }
                    };
                    send(*a, g.hadamard(&local)?);
                }
                Op::RowSums(a) => {
                    let va = val(*a);
                    let mut d = Matrix::zeros(va.rows(), va.cols());
                    for i in 0..va.rows() {
                        d.row_mut(i).fill(g[(i, 0)]);
                    }
                    send(*a, d);
                }
                Op::Sum(a) => {
                    let va = val(*a);
                    send(*a, Matrix::filled(va.rows(), va.cols(), g.item()));
                }
                Op::Mean(a) => {
                    let va = val(*a);
                    send(*a, Matrix::filled(va.rows(), va.cols(), g.item() / va.len() as f64));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let width = val(*p).cols();
                        if nodes[p.0].tracked {
                            let mut d = Matrix::zeros(g.rows(), width);
                            for i in 0..g.rows() {
                                d.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + width]);
                            }
                            send(*p, d);
                        }
                        offset += width;
                    }
                }
                Op::SliceRows(a, start) => {
                    let va = val(*a);
                    let mut d = Matrix::zeros(va.rows(), va.cols());
                    for i in 0..g.rows() {
                        d.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    send(*a, d);
                }
                Op::Softmax(z) => {
                    let mut d = Matrix::zeros(out.rows(), out.cols());
                    for i in 0..out.rows() {
                        let p = out.row(i);
                        let gi = g.row(i);
                        let dot: f64 = p.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for (k, dk) in d.row_mut(i).iter_mut().enumerate() {
                            *dk = p[k] * (gi[k] - dot);
                        }
                    }
                    send(*z, d);
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                    rows,
                } => {
                    let p = val(*probs);
                    let scale = g.item() / rows.len() as f64;
                    let mut d = Matrix::zeros(p.rows(), p.cols());
                    for &i in rows.iter() {
                        let y = targets.row(i);
                        let pi = p.row(i);
                        for (k, dk) in d.row_mut(i).iter_mut().enumerate() {
                            *dk += scale * (pi[k] - y[k]);
                        }
                    }
                    send(*logits, d);
                }
                Op::CosinePairs {
                    a,
                    b,
                    pairs,
                    norms_a,
                    norms_b,
                } => {
                    let (va, vb) = (val(*a), val(*b));
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    let mut db = Matrix::zeros(vb.rows(), vb.cols());
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let gk = g[(k, 0)];
                        if gk == 0.0 {
                            continue;
                        }
                        let c = out[(k, 0)];
                        let (na, nb) = (norms_a[i], norms_b[j]);
                        let inv = 1.0 / (na * nb);
                        let (ai, bj) = (va.row(i), vb.row(j));
                        let da_i = da.row_mut(i);
                        for m in 0..ai.len() {
                            da_i[m] += gk * (bj[m] * inv - c * ai[m] / (na * na));
                        }
                        let db_j = db.row_mut(j);
                        for m in 0..bj.len() {
                            db_j[m] += gk * (ai[m] * inv - c * bj[m] / (nb * nb));
                        }
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::GatherPairs(a, pairs) => {
                    let va = val(*a);
                    let mut d = Matrix::zeros(va.rows(), va.cols());
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        d[(i, j)] += g[(k, 0)];
                    }
                    send(*a, d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn row_norms(m: &Matrix) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Outcome of comparing analytic gradients to central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter and flat entry index of the worst disagreement.
    pub worst: Option<(ParamId, usize)>,
    pub entries_checked: usize,
}

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of `loss_fn` against `(f(p+h) - f(p-h)) / 2h`
/// for every parameter entry. The relative error of one entry is
/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(params: &ParameterSet, step: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterSet, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    let analytic = tape.backward(loss, params)?;

    let mut eval = |p: &ParameterSet| -> Result<f64> {
        let mut tape = Tape::new();
        let v = loss_fn(p, &mut tape)?;
        Ok(tape.value(v).item())
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).as_slice()[k];
            probe.get_mut(id).as_mut_slice()[k] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(id).as_mut_slice()[k] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(id).as_mut_slice()[k] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id).as_slice()[k];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if !rel.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient comparison at {}[{k}]",
                    params.name(id)
                )));
            }
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((id, k));
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// `sum(out ⊙ r)` for a fixed random `r`, so every output entry gets a
    /// distinct upstream weight.
    fn readout(tape: &mut Tape, out: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = tape.value(out).shape();
        let w = tape.constant(random(r, c, &mut rng));
        let prod = tape.hadamard(out, w).unwrap();
        tape.sum(prod)
    }

    fn check_unary(shape: (usize, usize), f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParameterSet::new();
        let id = params.add("x", random(shape.0, shape.1, &mut rng));
        grad_check(&params, 1e-5, |p, tape| {
            let x = tape.param(p, id);
            let y = f(tape, x);
            Ok(readout(tape, y, 11))
        })
        .unwrap()
        .max_relative_error
    }

    fn check_binary(a: (usize, usize), b: (usize, usize), f: impl Fn(&mut Tape, Var, Var) -> Var) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParameterSet::new();
        let ia = params.add("a", random(a.0, a.1, &mut rng));
        let ib = params.add("b", random(b.0, b.1, &mut rng));
        grad_check(&params, 1e-5, |p, tape| {
            let x = tape.param(p, ia);
            let y = tape.param(p, ib);
            let z = f(tape, x, y);
            Ok(readout(tape, z, 5))
        })
        .unwrap()
        .max_relative_error
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut tape = Tape::new();
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]);
        let i3 = tape.constant(Matrix::identity(3));
        let mv = tape.constant(m.clone());
        let out = tape.matmul(i3, mv).unwrap();
        assert_eq!(tape.value(out), &m);

        let a = tape.constant(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = tape.constant(Matrix::from_rows(&[[1.0], [1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &Matrix::from_rows(&[[3.0], [7.0]]));

        let bad = tape.constant(Matrix::zeros(2, 3));
        let sq = tape.constant(Matrix::zeros(2, 2));
        assert!(matches!(tape.matmul(bad, sq), Err(Error::Dimension { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let m = tape.constant(Matrix::from_rows(&[[1.5, -2.0], [0.25, 3.0]]));
        let ones = tape.constant(Matrix::filled(2, 2, 1.0));
        let h = tape.hadamard(m, ones).unwrap();
        assert_eq!(tape.value(h), tape.value(m));

        let v = tape.constant(Matrix::from_rows(&[[2.0, 4.0]]));
        let s = tape.scale(v, 0.5);
        assert_eq!(tape.value(s), &Matrix::from_rows(&[[1.0, 2.0]]));

        let wrong = tape.constant(Matrix::zeros(1, 3));
        assert!(matches!(tape.add(v, wrong), Err(Error::Dimension { .. })));
    }

    #[test]
    fn add_gradient_is_identity() {
        let mut params = ParameterSet::new();
        let a = params.add("a", Matrix::from_rows(&[[0.3, -0.7]]));
        let b = params.add("b", Matrix::from_rows(&[[1.1, 2.0]]));
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&params, a), tape.param(&params, b));
        let s = tape.add(va, vb).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss, &params).unwrap();
        assert_eq!(g.get(a), &Matrix::filled(1, 2, 1.0));
        assert_eq!(g.get(b), &Matrix::filled(1, 2, 1.0));
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::from_rows(&[[0.0, 4.0]]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s)[(0, 0)], 0.5);
        let r = tape.rsqrt_clamped(z, 1e-8);
        assert_eq!(tape.value(r)[(0, 1)], 0.5);
        assert!((tape.value(r)[(0, 0)] - 1e4).abs() < 1e-8);
    }

    #[test]
    fn rsqrt_gradient_vanishes_in_clamped_region() {
        let mut params = ParameterSet::new();
        let id = params.add("d", Matrix::from_rows(&[[0.0, 4.0]]));
        let mut tape = Tape::new();
        let d = tape.param(&params, id);
        let r = tape.rsqrt_clamped(d, 1e-8);
        let loss = tape.sum(r);
        let g = tape.backward(loss, &params).unwrap();
        assert_eq!(g.get(id)[(0, 0)], 0.0);
        assert!((g.get(id)[(0, 1)] - (-0.5 / 8.0)).abs() < 1e-15);
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(4, 2));
        let b = tape.constant(Matrix::zeros(4, 3));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), (4, 5));
        let single = tape.concat_cols(&[b]).unwrap();
        assert_eq!(tape.value(single), tape.value(b));
        let short = tape.constant(Matrix::zeros(3, 1));
        assert!(tape.concat_cols(&[a, short]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_limit() {
        let mut tape = Tape::new();
        let logits = tape.constant(Matrix::zeros(3, 2));
        let y = Arc::new(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]));
        let (loss, probs) = tape
            .softmax_cross_entropy(logits, y.clone(), Arc::from(vec![0, 1, 2]))
            .unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(tape.value(probs)[(1, 1)], 0.5);

        let sharp = tape.constant(Matrix::from_rows(&[[800.0, -800.0], [-800.0, 800.0], [800.0, -800.0]]));
        let (loss, _) = tape.softmax_cross_entropy(sharp, y.clone(), Arc::from(vec![0, 1])).unwrap();
        assert!(tape.value(loss).item() < 1e-300);

        assert!(tape.softmax_cross_entropy(logits, y, Arc::from(Vec::new())).is_err());
    }

    #[test]
    fn cross_entropy_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let z = random(4, 3, &mut rng).scale(3.0);
        let y = Matrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
        let rows = vec![0, 2, 3];
        // Oracle: −Σ y log softmax, with softmax evaluated naively.
        let mut oracle = 0.0;
        for &i in &rows {
            let denom: f64 = (0..3).map(|k| z[(i, k)].exp()).sum();
            for k in 0..3 {
                oracle -= y[(i, k)] * (z[(i, k)].exp() / denom).ln();
            }
        }
        oracle /= rows.len() as f64;
        let mut tape = Tape::new();
        let zl = tape.constant(z);
        let (loss, _) = tape.softmax_cross_entropy(zl, Arc::new(y), Arc::from(rows)).unwrap();
        assert!((tape.value(loss).item() - oracle).abs() < 1e-14);
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::new();
        let y = tape.constant(Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]));
        let c = tape.cosine_pairs(y, y, Arc::from(vec![(0, 1), (0, 2)])).unwrap();
        assert_eq!(tape.value(c).as_slice(), &[1.0, 0.0]);

        let p = tape.constant(Matrix::from_rows(&[[0.9, 0.1], [0.1, 0.9]]));
        let c = tape.cosine_pairs(p, p, Arc::from(vec![(0, 1)])).unwrap();
        assert!((tape.value(c).item() - 0.18 / 0.82).abs() < 1e-15);
        assert!((tape.value(c).item() - 0.2195).abs() < 1e-4);

        let z = tape.constant(Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]));
        let err = tape.cosine_pairs(z, z, Arc::from(vec![(0, 1)])).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn backward_examples() {
        let mut params = ParameterSet::new();
        let w = params.add("w", Matrix::from_rows(&[[0.5, -3.0], [2.0, 7.0]]));
        let mut tape = Tape::new();
        let v = tape.param(&params, w);
        let loss = tape.sum(v);
        assert_eq!(tape.backward(loss, &params).unwrap().get(w), &Matrix::filled(2, 2, 1.0));

        let mut params = ParameterSet::new();
        let w = params.add("w", Matrix::scalar(3.0));
        let mut tape = Tape::new();
        let v = tape.param(&params, w);
        let sq = tape.hadamard(v, v).unwrap();
        let loss = tape.sum(sq);
        assert_eq!(tape.backward(loss, &params).unwrap().get(w), &Matrix::scalar(6.0));

        let mut tape = Tape::new();
        let v = tape.param(&params, w);
        let wide = tape.concat_cols(&[v, v]).unwrap();
        assert!(matches!(tape.backward(wide, &params), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_check_examples() {
        let mut params = ParameterSet::new();
        let id = params.add("w", Matrix::from_rows(&[[0.3, -1.2, 2.5]]));
        let quad = grad_check(&params, 1e-5, |p, tape| {
            let w = tape.param(p, id);
            let sq = tape.hadamard(w, w)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(quad.max_relative_error <= 1e-8, "{quad:?}");

        let chain = grad_check(&params, 1e-5, |p, tape| {
            let w = tape.param(p, id);
            let s1 = tape.sigmoid(w);
            let s2 = tape.affine(s1, 3.0, -1.0);
            let s3 = tape.sigmoid(s2);
            Ok(tape.sum(s3))
        })
        .unwrap();
        assert!(chain.max_relative_error <= 1e-4, "{chain:?}");

        let mut tape = Tape::new();
        let c = tape.constant(Matrix::scalar(4.0));
        let g = tape.backward(c, &params).unwrap();
        assert_eq!(g.get(id), &Matrix::zeros(1, 3));
        let flat = grad_check(&params, 1e-5, |_, tape| Ok(tape.constant(Matrix::scalar(4.0)))).unwrap();
        assert_eq!(flat.max_relative_error, 0.0);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let tol = 1e-4;
        let errs = [
            ("matmul", check_binary((3, 4), (4, 2), |t, a, b| t.matmul(a, b).unwrap())),
            ("add", check_binary((3, 2), (3, 2), |t, a, b| t.add(a, b).unwrap())),
            ("sub", check_binary((3, 2), (3, 2), |t, a, b| t.sub(a, b).unwrap())),
            ("hadamard", check_binary((3, 2), (3, 2), |t, a, b| t.hadamard(a, b).unwrap())),
            ("add_row", check_binary((4, 3), (1, 3), |t, a, b| t.add_row(a, b).unwrap())),
            ("concat", check_binary((3, 2), (3, 1), |t, a, b| t.concat_cols(&[a, b, a]).unwrap())),
            ("gram", check_unary((4, 3), |t, x| t.gram(x))),
            ("transpose", check_unary((2, 3), |t, x| t.transpose(x))),
            ("affine", check_unary((2, 3), |t, x| t.affine(x, -1.7, 0.4))),
            ("sigmoid", check_unary((3, 3), |t, x| t.sigmoid(x))),
            ("tanh", check_unary((3, 3), |t, x| t.tanh(x))),
            ("rsqrt", check_unary((3, 3), |t, x| {
                let shifted = t.affine(x, 1.0, 1.5);
                t.rsqrt_clamped(shifted, 1e-8)
            })),
            ("row_sums", check_unary((3, 4), |t, x| t.row_sums(x))),
            ("mean", check_unary((3, 4), |t, x| t.mean(x).unwrap())),
            ("slice_rows", check_unary((5, 2), |t, x| t.slice_rows(x, 1, 3).unwrap())),
            ("softmax", check_unary((4, 3), |t, x| t.softmax(x))),
            ("cosine", check_binary((4, 3), (4, 3), |t, a, b| {
                t.cosine_pairs(a, b, Arc::from(vec![(0, 1), (2, 2), (3, 0), (1, 3)])).unwrap()
            })),
            ("cosine_self", check_unary((4, 3), |t, x| {
                t.cosine_pairs(x, x, Arc::from(vec![(0, 1), (1, 2), (0, 3)])).unwrap()
            })),
            ("gather", check_unary((3, 3), |t, x| t.gather_pairs(x, Arc::from(vec![(0, 1), (2, 0), (0, 1)])).unwrap())),
            ("cross_entropy", check_unary((4, 3), |t, x| {
                let y = Matrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
                t.softmax_cross_entropy(x, Arc::new(y), Arc::from(vec![0, 1, 3])).unwrap().0
            })),
        ];
        for (name, err) in errs {
            assert!(err <= tol, "{name}: relative error {err:e}");
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = ParameterSet::new();
        let id = params.add("w", random(3, 3, &mut rng));
        let grad_of = |weights: (f64, f64)| {
            let mut tape = Tape::new();
            let w = tape.param(&params, id);
            let f = tape.sigmoid(w);
            let f = tape.sum(f);
            let g = tape.gram(w);
            let g = tape.sum(g);
            let fa = tape.scale(f, weights.0);
            let gb = tape.scale(g, weights.1);
            let loss = tape.add(fa, gb).unwrap();
            tape.backward(loss, &params).unwrap().get(id).clone()
        };
        let combined = grad_of((2.5, -0.75));
        let separate = grad_of((1.0, 0.0))
            .scale(2.5)
            .add(&grad_of((0.0, 1.0)).scale(-0.75))
            .unwrap();
        assert!(combined.sub(&separate).unwrap().max_abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
            let m = Matrix::from_vec(4, 3, vals).unwrap();
            let p = softmax_rows(&m);
            for i in 0..4 {
                prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(p.row(i).iter().all(|&x| x > 0.0));
            }
        }

        #[test]
        fn tape_replay_is_bitwise_deterministic(seed in 0u64..1000) {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut params = ParameterSet::new();
                let id = params.add("w", random(3, 4, &mut rng));
                let x = random(5, 3, &mut rng);
                let mut tape = Tape::new();
                let xv = tape.constant(x);
                let w = tape.param(&params, id);
                let h = tape.matmul(xv, w).unwrap();
                let h = tape.tanh(h);
                let g = tape.gram(h);
                let s = tape.sigmoid(g);
                let loss = tape.mean(s).unwrap();
                let value = tape.value(loss).item();
                (value, tape.backward(loss, &params).unwrap())
            };
            let (a, ga) = run();
            let (b, gb) = run();
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert_eq!(ga, gb);
        }
    }
}
