//! Empirical probes of the stability bounds, similarity histograms, filter
//! responses and audits of learned graphs.
//!
//! Every report type can be rendered as CSV with a single header line; JSON
//! sidecars carry the configuration and seeds.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::write_text;
use crate::error::{Error, Result};
use crate::graph::{heterophily_ratio, normalized_laplacian, operator_distance, perturb_laplacian, symmetric_eig, upper_edges, DEGREE_EPS, EIG_TOL};
use crate::matrix::{argmax, Matrix};
use crate::model::{kernel_value, BankKind, KernelMode};
use crate::rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn one_hot_class(row: &[f64]) -> Option<usize> {
    let ones = row.iter().filter(|&&v| v == 1.0).count();
    let zeros = row.iter().filter(|&&v| v == 0.0).count();
    (ones == 1 && ones + zeros == row.len()).then(|| argmax(row))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Record {
    pub i: usize,
    pub j: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// For each pair: `lhs = |cos(y_i, y_j) - cos(ŷ_i, ŷ_j)|` and
/// `rhs = 2√C (‖y_i - ŷ_i‖ + ‖y_j - ŷ_j‖)`.
pub fn prop1_check(y: &Matrix, yhat: &Matrix, pairs: &[(usize, usize)]) -> Result<Vec<Prop1Record>> {
    if y.shape() != yhat.shape() {
        return Err(Error::Dimension {
            op: "prop1_check",
            left: y.shape(),
            right: yhat.shape(),
        });
    }
    let n = y.rows();
    for i in 0..n {
        if one_hot_class(y.row(i)).is_none() {
            return Err(Error::contract(format!("label row {i} is not one-hot")));
        }
        if yhat.row(i).iter().any(|&p| !(p > 0.0)) {
            return Err(Error::contract(format!("prediction row {i} has a non-positive entry")));
        }
    }
    let scale = 2.0 * (y.cols() as f64).sqrt();
    let err: Vec<f64> = (0..n)
        .map(|i| norm(&y.row(i).iter().zip(yhat.row(i)).map(|(a, b)| a - b).collect::<Vec<_>>()))
        .collect();
    pairs
        .iter()
        .map(|&(i, j)| {
            if i >= n || j >= n {
                return Err(Error::contract(format!("pair ({i}, {j}) out of range for {n} rows")));
            }
            let lhs = (cosine(y.row(i), y.row(j)) - cosine(yhat.row(i), yhat.row(j))).abs();
            let rhs = scale * (err[i] + err[j]);
            Ok(Prop1Record {
                i,
                j,
                lhs,
                rhs,
                holds: lhs <= rhs + 1e-12,
            })
        })
        .collect()
}

/// Randomized sweep: `trials` independent draws of a labeled pair with a
/// random class count in `2..=8` and random softmax predictions.
pub fn prop1_sweep(trials: usize, seed: u64) -> Result<Prop1Summary> {
    let mut r = rng::seeded(seed);
    let mut summary = Prop1Summary {
        trials,
        seed,
        violations: 0,
        max_ratio: 0.0,
    };
    for _ in 0..trials {
        let c = r.random_range(2..=8usize);
        let mut y = Matrix::zeros(2, c);
        y[(0, r.random_range(0..c))] = 1.0;
        y[(1, r.random_range(0..c))] = 1.0;
        let sharpness = r.random_range(0.0..8.0);
        let logits = rng::standard_normal(2, c, &mut r).scale(sharpness);
        let mut yhat = crate::autodiff::softmax_rows(&logits);
        for row in 0..2 {
            for k in 0..c {
                if yhat[(row, k)] <= 0.0 {
                    yhat[(row, k)] = f64::MIN_POSITIVE;
                }
            }
        }
        let rec = prop1_check(&y, &yhat, &[(0, 1)])?[0];
        if !rec.holds {
            summary.violations += 1;
        }
        if rec.rhs > 0.0 {
            summary.max_ratio = summary.max_ratio.max(rec.lhs / rec.rhs);
        }
    }
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Summary {
    pub trials: usize,
    pub seed: u64,
    pub violations: usize,
    /// Largest observed `lhs / rhs`.
    pub max_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundProbeRecord {
    pub epsilon: f64,
    pub trial: usize,
    pub j: usize,
    pub observed_distance: f64,
    pub bound_value: f64,
    pub delta: f64,
    pub holds_with_slack: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub records: Vec<BoundProbeRecord>,
    /// Least-squares slope of `ln(mean distance)` against `ln ε` over the
    /// positive epsilons, when at least two are present.
    pub slope: Option<f64>,
    pub eigenvector_convention: String,
}

impl StabilityReport {
    pub fn violations(&self) -> usize {
        self.records.iter().filter(|r| !r.holds_with_slack).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,trial,j,observed_distance,bound_value,delta,holds_with_slack\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epsilon, r.trial, r.j, r.observed_distance, r.bound_value, r.delta, r.holds_with_slack
            ));
        }
        out
    }
}

/// `h(L)` assembled from the eigendecomposition and the scalar kernel.
pub fn dense_filter(l: &Matrix, j: usize, mode: KernelMode, kind: BankKind) -> Result<Matrix> {
    kernel_value(j, 0.0, mode, kind)?;
    let eig = symmetric_eig(l, EIG_TOL * l.max_abs().max(1.0))?;
    let mut h = eig.apply_fn(|lam| kernel_value(j, lam, mode, kind).expect("scale checked"));
    h.mirror_upper();
    Ok(h)
}

/// Compares `h_j(L)` with `h_j(L + E)` for `‖E‖₂ = ε`. Trial `t` uses the same
/// direction of `E` for every `ε`, so the distances of one trial trace a curve
/// in `ε`.
pub fn stability_probe(
    l: &Matrix,
    j: usize,
    mode: KernelMode,
    kind: BankKind,
    epsilons: &[f64],
    trials: usize,
    seed: u64,
) -> Result<StabilityReport> {
    if let Some(e) = epsilons.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::contract(format!("epsilon {e} must be >= 0")));
    }
    let base = dense_filter(l, j, mode, kind)?;
    let sqrt_n = (l.rows() as f64).sqrt();
    let lead = (1u64 << (j - 1)) as f64;
    let jobs: Vec<(usize, f64)> = (0..trials)
        .flat_map(|t| epsilons.iter().map(move |&e| (t, e)))
        .collect();
    let records = jobs
        .into_par_iter()
        .map(|(trial, epsilon)| {
            let p = perturb_laplacian(l, epsilon, seed.wrapping_add(trial as u64))?;
            let moved = dense_filter(&p.perturbed, j, mode, kind)?;
            let observed_distance = operator_distance(&base, &moved)?;
            let bound_value = lead * (1.0 + p.delta * sqrt_n) * epsilon;
            Ok(BoundProbeRecord {
                epsilon,
                trial,
                j,
                observed_distance,
                bound_value,
                delta: p.delta,
                holds_with_slack: observed_distance <= bound_value * (1.0 + 10.0 * epsilon),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let slope = loglog_slope(&records);
    Ok(StabilityReport {
        records,
        slope,
        eigenvector_convention: "ascending eigenvalues; each eigenvector signed so its first entry above 1e-12 in magnitude is positive".into(),
    })
}

fn loglog_slope(records: &[BoundProbeRecord]) -> Option<f64> {
    let mut eps: Vec<f64> = records.iter().map(|r| r.epsilon).filter(|&e| e > 0.0).collect();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    if eps.len() < 2 {
        return None;
    }
    let points: Vec<(f64, f64)> = eps
        .iter()
        .map(|&e| {
            let ds: Vec<f64> = records.iter().filter(|r| r.epsilon == e).map(|r| r.observed_distance).collect();
            (e.ln(), (ds.iter().sum::<f64>() / ds.len() as f64).ln())
        })
        .collect();
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Laplacian of an Erdős–Rényi graph with uniform `(0, 1]` weights.
pub fn random_weighted_laplacian(n: usize, density: f64, seed: u64) -> Result<Matrix> {
    let mut r = rng::seeded(seed);
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if r.random::<f64>() < density {
                let v = 1.0 - r.random::<f64>();
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
    }
    normalized_laplacian(&w, DEGREE_EPS)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSampling {
    pub max_pairs: usize,
    pub seed: u64,
    /// Available pairs per group before sampling.
    pub intra_available: u64,
    pub inter_available: u64,
    /// True when a group was subsampled (uniformly, with replacement).
    pub intra_sampled: bool,
    pub inter_sampled: bool,
    pub skipped_classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    /// `bins + 1` edges spanning `[-1, 1]`.
    pub edges: Vec<f64>,
    pub intra: Vec<u64>,
    pub inter: Vec<u64>,
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub sampling: PairSampling,
}

impl SimilarityHistogram {
    pub fn gap(&self) -> f64 {
        self.intra_mean - self.inter_mean
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,intra,inter\n");
        for b in 0..self.intra.len() {
            out.push_str(&format!("{},{},{},{}\n", self.edges[b], self.edges[b + 1], self.intra[b], self.inter[b]));
        }
        out
    }
}

/// Cosine similarities of intra-class and inter-class node pairs. Groups
/// with more than `max_pairs` pairs are subsampled.
pub fn similarity_histogram(
    vectors: &Matrix,
    labels: &Matrix,
    max_pairs: usize,
    bins: usize,
    seed: u64,
) -> Result<SimilarityHistogram> {
    if vectors.rows() != labels.rows() {
        return Err(Error::Dimension {
            op: "similarity_histogram",
            left: vectors.shape(),
            right: labels.shape(),
        });
    }
    if bins == 0 || max_pairs == 0 {
        return Err(Error::contract("bins and max_pairs must be positive"));
    }
    let n = vectors.rows();
    let classes = labels.argmax_rows();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); labels.cols()];
    for (i, &c) in classes.iter().enumerate() {
        members[c].push(i);
    }
    let mut skipped = Vec::new();
    for (c, m) in members.iter().enumerate() {
        if m.len() < 2 {
            log::warn!("class {c} has {} member(s); skipped for intra-class pairs", m.len());
            skipped.push(c);
        }
    }
    let intra_available: u64 = members.iter().map(|m| (m.len() as u64) * (m.len() as u64).saturating_sub(1) / 2).sum();
    let inter_available = (n as u64) * (n as u64).saturating_sub(1) / 2 - intra_available;

    let mut r = rng::seeded(seed);
    let intra_pairs: Vec<(usize, usize)> = if intra_available as usize <= max_pairs {
        members
            .iter()
            .flat_map(|m| (0..m.len()).flat_map(move |a| ((a + 1)..m.len()).map(move |b| (m[a], m[b]))))
            .collect()
    } else {
        let weighted: Vec<&Vec<usize>> = members.iter().filter(|m| m.len() >= 2).collect();
        (0..max_pairs)
            .map(|_| {
                let m = weighted
                    .choose_weighted(&mut r, |m| (m.len() * (m.len() - 1)) as f64)
                    .expect("at least one class has two members");
                let a = r.random_range(0..m.len());
                let mut b = r.random_range(0..m.len() - 1);
                if b >= a {
                    b += 1;
                }
                (m[a], m[b])
            })
            .collect()
    };
    let inter_pairs: Vec<(usize, usize)> = if inter_available as usize <= max_pairs {
        (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(|&(i, j)| classes[i] != classes[j])
            .collect()
    } else {
        let mut out = Vec::with_capacity(max_pairs);
        while out.len() < max_pairs {
            let (i, j) = (r.random_range(0..n), r.random_range(0..n));
            if classes[i] != classes[j] {
                out.push((i.min(j), i.max(j)));
            }
        }
        out
    };

    let norms: Vec<f64> = (0..n).map(|i| norm(vectors.row(i))).collect();
    let tally = |pairs: &[(usize, usize)]| -> Result<(Vec<u64>, f64)> {
        let mut counts = vec![0u64; bins];
        let mut total = 0.0;
        for &(i, j) in pairs {
            for k in [i, j] {
                if norms[k] == 0.0 {
                    return Err(Error::contract(format!("row {k} has zero norm")));
                }
            }
            let c = (dot(vectors.row(i), vectors.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            total += c;
            let b = (((c + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let mean = if pairs.is_empty() { 0.0 } else { total / pairs.len() as f64 };
        Ok((counts, mean))
    };
    let (intra, intra_mean) = tally(&intra_pairs)?;
    let (inter, inter_mean) = tally(&inter_pairs)?;
    Ok(SimilarityHistogram {
        edges: (0..=bins).map(|b| -1.0 + 2.0 * b as f64 / bins as f64).collect(),
        intra,
        inter,
        intra_mean,
        inter_mean,
        sampling: PairSampling {
            max_pairs,
            seed,
            intra_available,
            inter_available,
            intra_sampled: intra_available as usize > max_pairs,
            inter_sampled: inter_available as usize > max_pairs,
            skipped_classes: skipped,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRow {
    pub lambda: f64,
    pub j: usize,
    pub kind: BankKind,
    pub value: f64,
}

/// `kernel_value` tabulated on `grid_points` evenly spaced λ in `[0, 2]` for
/// both banks and `j = 2..=max_scale`.
pub fn spectral_response_export(max_scale: usize, mode: KernelMode, grid_points: usize) -> Result<Vec<ResponseRow>> {
    if grid_points < 2 {
        return Err(Error::contract("need at least two grid points"));
    }
    let mut rows = Vec::with_capacity(grid_points * max_scale.saturating_sub(1) * 2);
    for kind in [BankKind::Low, BankKind::High] {
        for j in 2..=max_scale {
            for k in 0..grid_points {
                let lambda = 2.0 * k as f64 / (grid_points - 1) as f64;
                rows.push(ResponseRow {
                    lambda,
                    j,
                    kind,
                    value: kernel_value(j, lambda, mode, kind)?,
                });
            }
        }
    }
    Ok(rows)
}

pub fn response_csv(rows: &[ResponseRow]) -> String {
    let mut out = String::from("lambda,j,kind,value\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.lambda, r.j, r.kind, r.value));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphAudit {
    pub edges: usize,
    /// `None` when no weight exceeds the threshold.
    pub heterophily_ratio: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeAudit {
    pub threshold: f64,
    pub ho: Option<GraphAudit>,
    pub ht: Option<GraphAudit>,
}

impl EdgeAudit {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("graph,edges,heterophily_ratio\n");
        for (name, a) in [("ho", self.ho), ("ht", self.ht)] {
            if let Some(a) = a {
                let ratio = a.heterophily_ratio.map(|r| r.to_string()).unwrap_or_default();
                out.push_str(&format!("{name},{},{ratio}\n", a.edges));
            }
        }
        out
    }
}

/// Binarizes each learned mask at `threshold` (strictly above counts) and
/// reports its edge count and heterophily ratio.
pub fn learned_edge_audit(w1: Option<&Matrix>, w2: Option<&Matrix>, labels: &Matrix, threshold: f64) -> Result<EdgeAudit> {
    let audit = |w: &Matrix| -> Result<GraphAudit> {
        if w.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("learned weights must lie in [0, 1]"));
        }
        let edges = upper_edges(w, threshold).len();
        let ratio = if edges == 0 { None } else { Some(heterophily_ratio(w, labels, threshold)?) };
        Ok(GraphAudit {
            edges,
            heterophily_ratio: ratio,
        })
    };
    Ok(EdgeAudit {
        threshold,
        ho: w1.map(audit).transpose()?,
        ht: w2.map(audit).transpose()?,
    })
}

/// Writes `<stem>.csv` and the `<stem>.json` sidecar into `dir`.
pub fn write_report(dir: &Path, stem: &str, csv: &str, sidecar: &impl Serialize) -> Result<()> {
    write_text(&dir.join(format!("{stem}.csv")), csv)?;
    write_text(&dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(sidecar)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn prop1_hand_example() {
        let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let yhat = Matrix::from_rows(&[[0.9, 0.1], [1e-300, 1.0]]);
        let rec = prop1_check(&y, &yhat, &[(0, 1)]).unwrap()[0];
        // cos((0.9, 0.1), (0, 1)) = 0.1 / |(0.9, 0.1)|
        assert_relative_eq!(rec.lhs, 0.1 / 0.82f64.sqrt(), epsilon = 1e-12);
        let eps_i = 0.02f64.sqrt();
        let eps_j = 1e-300;
        assert_relative_eq!(rec.rhs, 2.0 * 2f64.sqrt() * (eps_i + eps_j), epsilon = 1e-12);
        assert_relative_eq!(rec.rhs, 0.4, epsilon = 1e-12);
        assert!(rec.holds);
    }

    #[test]
    fn prop1_exact_predictions() {
        let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let rec = prop1_check(&y, &y.map(|v| v.max(f64::MIN_POSITIVE)), &[(0, 1)]).unwrap()[0];
        assert!(rec.lhs < 1e-300 && rec.rhs < 1e-300 && rec.holds);
        let bad = Matrix::from_rows(&[[0.5, 0.5], [0.0, 1.0]]);
        assert!(prop1_check(&bad, &bad, &[(0, 1)]).is_err());
    }

    #[test]
    fn prop1_sweep_has_no_violations() {
        assert_eq!(prop1_sweep(10_000, 1).unwrap().violations, 0);
    }

    #[test]
    fn zero_perturbation_has_zero_distance() {
        let l = random_weighted_laplacian(8, 0.5, 2).unwrap();
        let rep = stability_probe(&l, 3, KernelMode::Fig3, BankKind::Low, &[0.0], 2, 0).unwrap();
        assert!(rep.records.iter().all(|r| r.observed_distance <= 1e-12));
        assert!(rep.slope.is_none());
    }

    #[test]
    fn response_table() {
        let rows = spectral_response_export(4, KernelMode::Fig3, 101).unwrap();
        assert_eq!(rows.len(), 101 * 3 * 2);
        for r in &rows {
            assert_eq!(r.value.to_bits(), kernel_value(r.j, r.lambda, KernelMode::Fig3, r.kind).unwrap().to_bits());
            if r.kind == BankKind::Low && r.lambda == 0.0 {
                assert_eq!(r.value, 0.0);
            }
        }
        let mass = |lo: bool| -> f64 {
            rows.iter()
                .filter(|r| r.kind == BankKind::Low && (r.lambda < 1.0) == lo && r.lambda != 1.0)
                .map(|r| r.value)
                .sum()
        };
        assert!(mass(true) > mass(false));
        assert_eq!(response_csv(&rows).lines().count(), rows.len() + 1);
    }

    #[test]
    fn one_hot_similarities() {
        let labels = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]);
        let h = similarity_histogram(&labels, &labels, 100, 10, 0).unwrap();
        assert_eq!(h.intra_mean, 1.0);
        assert_eq!(h.inter_mean, 0.0);
        assert_eq!(h.intra.iter().sum::<u64>(), 4);
        assert_eq!(h.inter.iter().sum::<u64>(), 6);
        assert_eq!(h.intra[9], 4);
        assert_eq!(h.inter[5], 6);
    }

    #[test]
    fn sampling_caps_pairs() {
        let mut r = rng::seeded(4);
        let v = rng::standard_normal(60, 3, &mut r);
        let mut labels = Matrix::zeros(60, 3);
        for i in 0..60 {
            labels[(i, i % 3)] = 1.0;
        }
        let h = similarity_histogram(&v, &labels, 50, 8, 1).unwrap();
        assert_eq!(h.intra.iter().sum::<u64>(), 50);
        assert_eq!(h.inter.iter().sum::<u64>(), 50);
        assert!(h.sampling.intra_sampled && h.sampling.inter_sampled);
    }

    #[test]
    fn audit_thresholds() {
        let labels = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        let w = Matrix::from_rows(&[[0.0, 0.7, 0.2], [0.7, 0.0, 0.9], [0.2, 0.9, 0.0]]);
        let all = learned_edge_audit(Some(&w), None, &labels, 0.0).unwrap();
        assert_eq!(all.ho.unwrap().edges, 3);
        assert!(all.ht.is_none());
        let a = learned_edge_audit(Some(&w), Some(&w), &labels, 0.5).unwrap();
        assert_eq!(a.ho.unwrap().edges, 2);
        assert_eq!(a.ho.unwrap().heterophily_ratio, Some(1.0));
        let none = learned_edge_audit(Some(&w), None, &labels, 1.0).unwrap();
        assert_eq!(none.ho.unwrap(), GraphAudit { edges: 0, heterophily_ratio: None });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn histogram_is_scale_invariant(seed in 0u64..1000, exp in -20i32..20) {
            let mut r = rng::seeded(seed);
            let v = rng::standard_normal(12, 4, &mut r);
            let mut labels = Matrix::zeros(12, 3);
            for i in 0..12 { labels[(i, (i * 7 + seed as usize) % 3)] = 1.0; }
            let a = similarity_histogram(&v, &labels, 1000, 16, seed).unwrap();
            let b = similarity_histogram(&v.scale(2f64.powi(exp)), &labels, 1000, 16, seed).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn stability_distance_is_symmetric(seed in 0u64..200, eps in 1e-4f64..1e-2) {
            let l = random_weighted_laplacian(7, 0.6, seed).unwrap();
            let p = perturb_laplacian(&l, eps, seed).unwrap();
            let a = dense_filter(&l, 2, KernelMode::Fig3, BankKind::High).unwrap();
            let b = dense_filter(&p.perturbed, 2, KernelMode::Fig3, BankKind::High).unwrap();
            let d1 = operator_distance(&a, &b).unwrap();
            let d2 = operator_distance(&b, &a).unwrap();
            prop_assert!((d1 - d2).abs() <= 1e-12);
            prop_assert!(d1 > 0.0);
        }
    }
}
