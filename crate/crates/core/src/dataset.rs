//! Dataset ingestion, synthetic graphs and candidate edge sets.
//!
//! Raw format (UTF-8, LF, `#` lines ignored):
//!
//! - node file: `id <TAB> f1,f2,...,fF <TAB> label`
//! - edge file: `src <TAB> dst`
//! - split file: three lines holding the train, validation and test indices,
//!   whitespace or comma separated
//!
//! A leading header line whose first field is not an integer is skipped, which
//! makes the WebKB-style `out1_node_feature_label.txt` / `out1_graph_edges.txt`
//! exports load unchanged. Node ids may be any distinct integers; node `k` of
//! the loaded graph is the `k`-th smallest id.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
pub use crate::graph::Split;
use crate::graph::{heterophily_ratio, upper_edges, LabeledGraph};
use crate::matrix::Matrix;
use crate::rng;

/// A loaded benchmark graph.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub name: String,
    pub graph: LabeledGraph,
    pub feature_normalized: bool,
}

/// Summary used in run manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub nodes: usize,
    pub edges: usize,
    pub features: usize,
    pub classes: usize,
    pub heterophily_ratio: Option<f64>,
    pub splits: usize,
}

impl DatasetBundle {
    pub fn new(name: impl Into<String>, graph: LabeledGraph, normalize: bool) -> Result<Self> {
        let graph = if normalize {
            let x = row_normalize(graph.features());
            graph.with_features(x)?
        } else {
            graph
        };
        Ok(DatasetBundle {
            name: name.into(),
            graph,
            feature_normalized: normalize,
        })
    }

    /// Loads `<dir>/{nodes.tsv, edges.tsv}` (or the WebKB export names) and
    /// every `<dir>/splits/*.txt`, ordered by the number embedded in the file
    /// name.
    pub fn load_dir(dir: &Path, normalize: bool) -> Result<Self> {
        let nodes = first_existing(dir, &["nodes.tsv", "out1_node_feature_label.txt"])?;
        let edges = first_existing(dir, &["edges.tsv", "out1_graph_edges.txt"])?;
        let graph = load_raw(&nodes, &edges)?;
        let split_dir = dir.join("splits");
        let splits = if split_dir.is_dir() {
            let files = split_files(&split_dir)?;
            load_splits(&files, graph.n())?
        } else {
            Vec::new()
        };
        let graph = graph.with_splits(splits)?;
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        DatasetBundle::new(name, graph, normalize)
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let g = &self.graph;
        Fingerprint {
            nodes: g.n(),
            edges: g.edges(0.0).len(),
            features: g.num_features(),
            classes: g.num_classes(),
            heterophily_ratio: heterophily_ratio(g.adjacency(), g.labels(), 0.0).ok(),
            splits: g.splits().len(),
        }
    }
}

fn first_existing(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::io(
                dir.join(names[0]),
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("none of {names:?} found in {}", dir.display()),
                ),
            )
        })
}

/// `*.txt` files in `dir`, sorted by the first run of digits in the name, then
/// by name.
pub fn split_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            files.push(path);
        }
    }
    let key = |p: &PathBuf| {
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let digits: String = name
            .chars()
            .skip_while(|c| !c.is_ascii_digit())
            .take_while(char::is_ascii_digit)
            .collect();
        (digits.parse::<u64>().unwrap_or(u64::MAX), name)
    };
    files.sort_by_key(key);
    Ok(files)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Content lines with 1-based line numbers: `#` comments dropped, plus a
/// leading header when its first field is not an integer.
fn data_lines(text: &str) -> Vec<(usize, &str)> {
    let mut out: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .collect();
    if let Some((_, first)) = out.first() {
        let head = first.split('\t').next().unwrap_or("").trim();
        if head.parse::<i64>().is_err() {
            out.remove(0);
        }
    }
    out
}

/// Parses a node file and an edge file into a graph without splits.
pub fn load_raw(node_file: &Path, edge_file: &Path) -> Result<LabeledGraph> {
    let text = read_text(node_file)?;
    let mut records: Vec<(i64, Vec<f64>, usize)> = Vec::new();
    let mut width: Option<usize> = None;
    for (line_no, line) in data_lines(&text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(node_file, line_no, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let id: i64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(node_file, line_no, format!("bad node id {:?}", fields[0])))?;
        let feats = fields[1]
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(node_file, line_no, format!("bad feature value: {e}")))?;
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(node_file, line_no, "non-finite feature value"));
        }
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(parse_err(
                    node_file,
                    line_no,
                    format!("feature length {} differs from earlier rows ({w})", feats.len()),
                ))
            }
            _ => {}
        }
        let label: usize = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(node_file, line_no, format!("bad label {:?}", fields[2])))?;
        records.push((id, feats, label));
    }
    if records.is_empty() {
        return Err(parse_err(node_file, 0, "no nodes"));
    }
    records.sort_by_key(|r| r.0);
    if let Some(w) = records.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(parse_err(node_file, 0, format!("duplicate node id {}", w[0].0)));
    }
    let index: BTreeMap<i64, usize> = records.iter().enumerate().map(|(k, r)| (r.0, k)).collect();
    let n = records.len();
    let f = width.unwrap_or(0);
    let classes = records.iter().map(|r| r.2).max().unwrap_or(0) + 1;
    let mut features = Matrix::zeros(n, f);
    let mut labels = Matrix::zeros(n, classes);
    for (k, (_, feats, label)) in records.iter().enumerate() {
        features.row_mut(k).copy_from_slice(feats);
        labels[(k, *label)] = 1.0;
    }

    let text = read_text(edge_file)?;
    let mut adjacency = Matrix::zeros(n, n);
    for (line_no, line) in data_lines(&text) {
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(parse_err(edge_file, line_no, format!("expected 2 tab-separated fields, found {}", fields.len())));
        }
        let mut ends = [0usize; 2];
        for (slot, field) in ends.iter_mut().zip(&fields) {
            let id: i64 = field
                .parse()
                .map_err(|_| parse_err(edge_file, line_no, format!("bad node id {field:?}")))?;
            *slot = *index
                .get(&id)
                .ok_or_else(|| parse_err(edge_file, line_no, format!("unknown node id {id}")))?;
        }
        let [a, b] = ends;
        if a != b {
            adjacency[(a, b)] = 1.0;
            adjacency[(b, a)] = 1.0;
        }
    }
    LabeledGraph::new(adjacency, features, labels, Vec::new())
}

/// Writes a graph in the raw format, ids `0..N`. Features are written with
/// Rust's shortest round-trip float formatting.
pub fn save_raw(graph: &LabeledGraph, node_file: &Path, edge_file: &Path) -> Result<()> {
    let mut nodes = String::new();
    let classes = graph.classes();
    for i in 0..graph.n() {
        let feats: Vec<String> = graph.features().row(i).iter().map(|v| format!("{v:?}")).collect();
        nodes.push_str(&format!("{i}\t{}\t{}\n", feats.join(","), classes[i]));
    }
    write_text(node_file, &nodes)?;
    let mut edges = String::new();
    for (i, j) in graph.edges(0.0) {
        edges.push_str(&format!("{i}\t{j}\n"));
    }
    write_text(edge_file, &edges)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads one split per file, in the given order, validated against `n` nodes.
pub fn load_splits(split_files: &[PathBuf], n: usize) -> Result<Vec<Split>> {
    split_files
        .iter()
        .map(|path| {
            let split = parse_split(path)?;
            split
                .validate(n)
                .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
            Ok(split)
        })
        .collect()
}

fn parse_split(path: &Path) -> Result<Split> {
    let text = read_text(path)?;
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim_start().starts_with('#'))
        .collect();
    if lines.len() != 3 {
        return Err(parse_err(path, 0, format!("expected 3 index lines, found {}", lines.len())));
    }
    let mut sets = lines.iter().map(|&(line_no, line)| {
        line.split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| parse_err(path, line_no, format!("bad index {s:?}")))
            })
            .collect::<Result<Vec<_>>>()
    });
    Ok(Split {
        train: sets.next().unwrap()?,
        val: sets.next().unwrap()?,
        test: sets.next().unwrap()?,
    })
}

pub fn save_split(split: &Split, path: &Path) -> Result<()> {
    let line = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    write_text(
        path,
        &format!("{}\n{}\n{}\n", line(&split.train), line(&split.val), line(&split.test)),
    )
}

/// Divides each nonzero row by its L1 norm.
pub fn row_normalize(features: &Matrix) -> Matrix {
    let mut out = features.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm: f64 = row.iter().map(|v| v.abs()).sum();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Parameters of the block-model generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: usize,
    pub intra_p: f64,
    pub inter_p: f64,
    pub proto_noise: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 300,
            classes: 3,
            intra_p: 0.005,
            inter_p: 0.05,
            proto_noise: 1.0,
            feature_dim: 16,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Ratio of expected inter-class to expected total edges.
    pub fn expected_heterophily(&self) -> f64 {
        let sizes = self.class_sizes();
        let intra_pairs: f64 = sizes.iter().map(|&m| (m * m.saturating_sub(1)) as f64 / 2.0).sum();
        let total_pairs = (self.n * (self.n - 1)) as f64 / 2.0;
        let inter_pairs = total_pairs - intra_pairs;
        let inter = self.inter_p * inter_pairs;
        inter / (inter + self.intra_p * intra_pairs)
    }

    fn class_sizes(&self) -> Vec<usize> {
        (0..self.classes)
            .map(|c| self.n / self.classes + usize::from(c < self.n % self.classes))
            .collect()
    }
}

/// A generated graph and its realized heterophily ratio (`None` when it has no
/// edges).
#[derive(Clone, Debug)]
pub struct SyntheticGraph {
    pub graph: LabeledGraph,
    pub heterophily: Option<f64>,
}

/// Stochastic block model with balanced classes. Node `i` belongs to class
/// `i mod classes`; features are a standard-normal class prototype plus
/// Gaussian noise of scale `proto_noise`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticGraph> {
    for (name, p) in [("intra_p", spec.intra_p), ("inter_p", spec.inter_p)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::contract(format!("{name} = {p} is not a probability")));
        }
    }
    if spec.classes == 0 || spec.n < spec.classes {
        return Err(Error::contract(format!(
            "need at least as many nodes ({}) as classes ({})",
            spec.n, spec.classes
        )));
    }
    if spec.proto_noise < 0.0 {
        return Err(Error::contract("proto_noise must be >= 0"));
    }
    let mut r = rng::seeded(spec.seed);
    let n = spec.n;
    let class_of = |i: usize| i % spec.classes;

    let prototypes = rng::standard_normal(spec.classes, spec.feature_dim, &mut r);
    let mut labels = Matrix::zeros(n, spec.classes);
    let noise = rng::standard_normal(n, spec.feature_dim, &mut r);
    let mut features = Matrix::zeros(n, spec.feature_dim);
    for i in 0..n {
        let c = class_of(i);
        labels[(i, c)] = 1.0;
        for k in 0..spec.feature_dim {
            features[(i, k)] = prototypes[(c, k)] + spec.proto_noise * noise[(i, k)];
        }
    }
    let mut adjacency = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if class_of(i) == class_of(j) { spec.intra_p } else { spec.inter_p };
            if r.random::<f64>() < p {
                adjacency[(i, j)] = 1.0;
                adjacency[(j, i)] = 1.0;
            }
        }
    }
    let heterophily = heterophily_ratio(&adjacency, &labels, 0.0).ok();
    Ok(SyntheticGraph {
        graph: LabeledGraph::new(adjacency, features, labels, Vec::new())?,
        heterophily,
    })
}

/// `count` random splits with the given train/val fractions; the rest is test.
pub fn random_splits(n: usize, count: usize, train_frac: f64, val_frac: f64, seed: u64) -> Vec<Split> {
    let mut r = rng::seeded(seed);
    (0..count)
        .map(|_| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut r);
            let n_train = ((n as f64) * train_frac).round().max(1.0) as usize;
            let n_val = ((n as f64) * val_frac).round().max(1.0) as usize;
            let mut train = idx[..n_train].to_vec();
            let mut val = idx[n_train..n_train + n_val].to_vec();
            let mut test = idx[n_train + n_val..].to_vec();
            train.sort_unstable();
            val.sort_unstable();
            test.sort_unstable();
            Split { train, val, test }
        })
        .collect()
}

/// Which edge superset the masks may carve from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CandidateMode {
    #[default]
    Full,
    Given,
    Knn(usize),
}

impl fmt::Display for CandidateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CandidateMode::Full => f.write_str("full"),
            CandidateMode::Given => f.write_str("given"),
            CandidateMode::Knn(k) => write!(f, "knn:{k}"),
        }
    }
}

impl FromStr for CandidateMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(CandidateMode::Full),
            "given" => Ok(CandidateMode::Given),
            _ => s
                .strip_prefix("knn:")
                .and_then(|k| k.parse().ok())
                .map(CandidateMode::Knn)
                .ok_or_else(|| format!("unknown candidate mode {s:?} (expected full, given or knn:K)")),
        }
    }
}

impl Serialize for CandidateMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CandidateMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Binary symmetric candidate adjacency with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateGraph {
    pub adjacency: Matrix,
    pub mode: CandidateMode,
}

impl CandidateGraph {
    /// Candidate edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        upper_edges(&self.adjacency, 0.0)
    }
}

/// Builds the candidate edge set.
///
/// `knn(k)` links each node to its `k` most cosine-similar other nodes (ties
/// to the lower index) and symmetrizes by union.
pub fn candidate_graph(graph: &LabeledGraph, mode: CandidateMode) -> Result<CandidateGraph> {
    let n = graph.n();
    let adjacency = match mode {
        CandidateMode::Full => {
            let mut a = Matrix::filled(n, n, 1.0);
            for i in 0..n {
                a[(i, i)] = 0.0;
            }
            a
        }
        CandidateMode::Given => graph.adjacency().map(|w| if w > 0.0 { 1.0 } else { 0.0 }),
        CandidateMode::Knn(k) => {
            if k >= n {
                return Err(Error::contract(format!("knn needs k < N, got k = {k}, N = {n}")));
            }
            knn_graph(graph.features(), k)
        }
    };
    Ok(CandidateGraph { adjacency, mode })
}

fn knn_graph(x: &Matrix, k: usize) -> Matrix {
    let n = x.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        let mut scored: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let denom = norms[i] * norms[j];
                let dot: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
                (if denom > 0.0 { dot / denom } else { 0.0 }, j)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, j) in scored.iter().take(k) {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
    }
    a
}
