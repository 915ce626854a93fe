//! Graph containers and spectral utilities.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::{argmax, Matrix};
use crate::rng;

/// Degree clamp used whenever a degree is inverted.
pub const DEGREE_EPS: f64 = 1e-8;

/// Cap on cyclic Jacobi sweeps before giving up.
pub const MAX_JACOBI_SWEEPS: usize = 50;

const SYMMETRY_TOL: f64 = 1e-9;

/// Disjoint train/validation/test node index sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Checks that every index is `< n`, sets are pairwise disjoint, no index
    /// repeats, and train/val are non-empty.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::validation("train set is empty"));
        }
        if self.val.is_empty() {
            return Err(Error::validation("validation set is empty"));
        }
        let mut owner = vec![None; n];
        for (name, set) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in set {
                if i >= n {
                    return Err(Error::validation(format!(
                        "{name} index {i} out of range for {n} nodes"
                    )));
                }
                if let Some(prev) = owner[i] {
                    return Err(Error::validation(format!(
                        "node {i} appears in both {prev} and {name}"
                    )));
                }
                owner[i] = Some(name);
            }
        }
        Ok(())
    }
}

/// Undirected weighted graph with node features, one-hot labels and splits.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledGraph {
    adjacency: Matrix,
    features: Matrix,
    labels: Matrix,
    splits: Vec<Split>,
}

impl LabeledGraph {
    pub fn new(adjacency: Matrix, features: Matrix, labels: Matrix, splits: Vec<Split>) -> Result<Self> {
        let n = adjacency.rows();
        if !adjacency.is_square() {
            return Err(Error::validation(format!(
                "adjacency must be square, got {:?}",
                adjacency.shape()
            )));
        }
        if features.rows() != n || labels.rows() != n {
            return Err(Error::validation(format!(
                "row counts disagree: adjacency {n}, features {}, labels {}",
                features.rows(),
                labels.rows()
            )));
        }
        if adjacency.asymmetry() > 1e-12 {
            return Err(Error::validation("adjacency is not symmetric"));
        }
        for i in 0..n {
            if adjacency[(i, i)] != 0.0 {
                return Err(Error::validation(format!("adjacency diagonal at {i} is nonzero")));
            }
        }
        if adjacency.as_slice().iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::validation("adjacency has negative or non-finite weights"));
        }
        for i in 0..n {
            let row = labels.row(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::validation(format!("label row {i} is not one-hot")));
            }
        }
        if !features.is_finite() {
            return Err(Error::validation("features contain NaN or Inf"));
        }
        for s in &splits {
            s.validate(n)?;
        }
        Ok(LabeledGraph {
            adjacency,
            features,
            labels,
            splits,
        })
    }

    pub fn n(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.cols()
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &Matrix {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn with_splits(mut self, splits: Vec<Split>) -> Result<Self> {
        for s in &splits {
            s.validate(self.n())?;
        }
        self.splits = splits;
        Ok(self)
    }

    pub fn with_features(mut self, features: Matrix) -> Result<Self> {
        if features.rows() != self.n() {
            return Err(Error::validation("feature row count changed"));
        }
        self.features = features;
        Ok(self)
    }

    /// Class index of every node.
    pub fn classes(&self) -> Vec<usize> {
        self.labels.argmax_rows()
    }

    /// Undirected edges `(i, j)`, `i < j`, with weight above `threshold`.
    pub fn edges(&self, threshold: f64) -> Vec<(usize, usize)> {
        upper_edges(&self.adjacency, threshold)
    }
}

/// Upper-triangular pairs whose weight exceeds `threshold`.
pub fn upper_edges(adjacency: &Matrix, threshold: f64) -> Vec<(usize, usize)> {
    let n = adjacency.rows();
    let mut out = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if adjacency[(i, j)] > threshold {
                out.push((i, j));
            }
        }
    }
    out
}

/// `I - D^{-1/2} W D^{-1/2}` with degrees clamped at `eps`.
///
/// Isolated nodes produce identity rows.
pub fn normalized_laplacian(weights: &Matrix, eps: f64) -> Result<Matrix> {
    check_symmetric(weights, "normalized_laplacian")?;
    let n = weights.rows();
    let inv_sqrt: Vec<f64> = weights
        .row_sums()
        .as_slice()
        .iter()
        .map(|&d| 1.0 / d.max(eps).sqrt())
        .collect();
    let mut l = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            l[(i, j)] -= weights[(i, j)] * inv_sqrt[i] * inv_sqrt[j];
        }
    }
    l.mirror_upper();
    Ok(l)
}

/// Tape version of [`normalized_laplacian`], differentiable in `weights`.
///
/// The caller is responsible for symmetry; the value is checked only in
/// debug builds.
pub fn normalized_laplacian_var(tape: &mut Tape, weights: Var, eps: f64) -> Result<Var> {
    let w = tape.value(weights);
    if !w.is_square() {
        return Err(Error::Dimension {
            op: "normalized_laplacian",
            left: w.shape(),
            right: w.shape(),
        });
    }
    debug_assert!(w.asymmetry() <= SYMMETRY_TOL);
    let n = w.rows();
    let degrees = tape.row_sums(weights);
    let inv_sqrt = tape.rsqrt_clamped(degrees, eps);
    let outer = tape.gram(inv_sqrt);
    let normalized = tape.hadamard(weights, outer)?;
    let eye = tape.constant(Matrix::identity(n));
    tape.sub(eye, normalized)
}

fn check_symmetric(m: &Matrix, op: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::contract(format!("{op}: matrix {:?} is not square", m.shape())));
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::contract(format!(
            "{op}: matrix is not symmetric (max |m_ij - m_ji| = {asym:e})"
        )));
    }
    Ok(())
}

/// Fraction of undirected edges above `edge_threshold` whose endpoints carry
/// different labels (argmax of the label rows).
pub fn heterophily_ratio(adjacency: &Matrix, labels: &Matrix, edge_threshold: f64) -> Result<f64> {
    if adjacency.rows() != labels.rows() {
        return Err(Error::Dimension {
            op: "heterophily_ratio",
            left: adjacency.shape(),
            right: labels.shape(),
        });
    }
    let classes = labels.argmax_rows();
    let edges = upper_edges(adjacency, edge_threshold);
    if edges.is_empty() {
        return Err(Error::contract(format!(
            "no edges with weight above {edge_threshold}"
        )));
    }
    let cross = edges.iter().filter(|&&(i, j)| classes[i] != classes[j]).count();
    Ok(cross as f64 / edges.len() as f64)
}

/// Eigenpairs of a symmetric matrix in ascending eigenvalue order. Column `k`
/// of `eigenvectors` pairs with `eigenvalues[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl SpectralDecomposition {
    /// `U · diag(f(λ)) · Uᵀ`.
    pub fn apply_fn(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.eigenvalues.len();
        let mut scaled = self.eigenvectors.clone();
        for k in 0..n {
            let h = f(self.eigenvalues[k]);
            for i in 0..n {
                scaled[(i, k)] *= h;
            }
        }
        let mut out = scaled.matmul_t(&self.eigenvectors).expect("square factors");
        out.mirror_upper();
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.apply_fn(|x| x)
    }

    /// Flips each eigenvector so its first entry with magnitude above `1e-12`
    /// is positive.
    pub fn sign_normalize(&mut self) {
        let n = self.eigenvalues.len();
        for k in 0..n {
            let lead = (0..n)
                .map(|i| self.eigenvectors[(i, k)])
                .find(|v| v.abs() > 1e-12);
            if matches!(lead, Some(v) if v < 0.0) {
                for i in 0..n {
                    self.eigenvectors[(i, k)] = -self.eigenvectors[(i, k)];
                }
            }
        }
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Sweeps over all `(p, q)` pairs until every off-diagonal magnitude is below
/// `tol`, failing after [`MAX_JACOBI_SWEEPS`] sweeps.
pub fn symmetric_eig(m: &Matrix, tol: f64) -> Result<SpectralDecomposition> {
    check_symmetric(m, "symmetric_eig")?;
    let n = m.rows();
    let mut a = m.clone();
    a.mirror_upper();
    let mut v = Matrix::identity(n);

    let off_max = |a: &Matrix| {
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max(a[(i, j)].abs());
            }
        }
        worst
    };

    let mut sweeps = 0;
    while off_max(&a) >= tol {
        if sweeps == MAX_JACOBI_SWEEPS {
            return Err(Error::numeric(format!(
                "Jacobi did not converge in {MAX_JACOBI_SWEEPS} sweeps (off-diagonal {:e})",
                off_max(&a)
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&k| a[(k, k)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            eigenvectors[(i, dst)] = v[(i, src)];
        }
    }
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Default tolerance for eigensolves in analysis paths.
pub const EIG_TOL: f64 = 1e-13;

/// Spectral norm of a symmetric matrix: its largest absolute eigenvalue.
pub fn symmetric_spectral_norm(m: &Matrix) -> Result<f64> {
    let eig = symmetric_eig(m, EIG_TOL * m.max_abs().max(1.0))?;
    Ok(eig.eigenvalues.iter().fold(0.0, |acc: f64, l| acc.max(l.abs())))
}

/// Spectral norm of an arbitrary matrix, `sqrt(λ_max(mᵀ m))`.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    let mut gram = m.t_matmul(m)?;
    gram.mirror_upper();
    let top = symmetric_spectral_norm(&gram)?;
    Ok(top.max(0.0).sqrt())
}

/// Operator distance between two graph operators on the same node labeling:
/// the spectral norm of `a - b`.
pub fn operator_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "operator_distance",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut diff = a.sub(b)?;
    check_symmetric(&diff, "operator_distance")?;
    diff.mirror_upper();
    symmetric_spectral_norm(&diff)
}

/// A Laplacian plus a random symmetric perturbation of fixed spectral norm.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub perturbed: Matrix,
    pub error: Matrix,
    /// `(‖U - V‖₂ + 1)² - 1`, with `U`, `V` the sorted, sign-normalized
    /// eigenvectors of the Laplacian and of the error.
    pub delta: f64,
}

/// Draws `E` symmetric with `‖E‖₂ = epsilon` and returns `L + E` together with
/// the eigenvector misalignment `δ`.
pub fn perturb_laplacian(l: &Matrix, epsilon: f64, seed: u64) -> Result<Perturbation> {
    if !(epsilon >= 0.0) {
        return Err(Error::contract(format!("perturbation magnitude {epsilon} must be >= 0")));
    }
    check_symmetric(l, "perturb_laplacian")?;
    let n = l.rows();
    let error = if epsilon == 0.0 {
        Matrix::zeros(n, n)
    } else {
        let mut r = rng::seeded(seed);
        let raw = rng::symmetric_normal(n, &mut r);
        let norm = symmetric_spectral_norm(&raw)?;
        let mut e = raw.scale(epsilon / norm);
        e.mirror_upper();
        e
    };
    let mut perturbed = l.add(&error)?;
    perturbed.mirror_upper();
    let delta = eigenvector_misalignment(l, &error)?;
    Ok(Perturbation {
        perturbed,
        error,
        delta,
    })
}

/// `(‖U - V‖₂ + 1)² - 1` for the sorted, sign-normalized eigenvectors of `l`
/// and `e`.
pub fn eigenvector_misalignment(l: &Matrix, e: &Matrix) -> Result<f64> {
    let mut u = symmetric_eig(l, EIG_TOL * l.max_abs().max(1.0))?;
    let mut v = symmetric_eig(e, EIG_TOL * e.max_abs().max(1e-300))?;
    u.sign_normalize();
    v.sign_normalize();
    let gap = spectral_norm(&u.eigenvectors.sub(&v.eigenvectors)?)?;
    Ok((gap + 1.0).powi(2) - 1.0)
}

/// Class index of each row of a probability or one-hot matrix.
pub fn row_classes(m: &Matrix) -> Vec<usize> {
    (0..m.rows()).map(|i| argmax(m.row(i))).collect()
}
