//! Undirected graphs with node features, file loaders, and held-out edge
//! splits for link prediction.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unordered node pair stored as `(min, max)`.
pub type Edge = (usize, usize);

#[inline]
pub fn canonical(a: usize, b: usize) -> Edge {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Per-node class ids, one column per labeling (synthetic graphs carry one
/// column per latent factor).
#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    pub columns: Vec<Vec<usize>>,
}

impl Labels {
    pub fn single(labels: Vec<usize>) -> Self {
        Self {
            columns: vec![labels],
        }
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    /// Number of distinct classes in column `c`.
    pub fn num_classes(&self, c: usize) -> usize {
        self.columns[c].iter().collect::<BTreeSet<_>>().len()
    }

    /// All columns combined into one id per distinct label tuple.
    pub fn joint(&self) -> Vec<usize> {
        let n = self.columns.first().map_or(0, Vec::len);
        let mut ids: HashMap<Vec<usize>, usize> = HashMap::new();
        (0..n)
            .map(|i| {
                let key: Vec<usize> = self.columns.iter().map(|c| c[i]).collect();
                let next = ids.len();
                *ids.entry(key).or_insert(next)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Graph {
    n: usize,
    edges: Vec<Edge>,
    pub features: Tensor,
    pub labels: Option<Labels>,
}

impl Graph {
    /// Builds a graph, dropping self-loops and duplicate (including reversed)
    /// pairs.
    pub fn new(n: usize, edges: impl IntoIterator<Item = Edge>, features: Tensor) -> Result<Self> {
        if features.rows() != n {
            return Err(Error::Graph(format!(
                "feature matrix has {} rows for {n} nodes",
                features.rows()
            )));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Graph(format!("edge ({a}, {b}) outside [0, {n})")));
            }
            if a != b {
                set.insert(canonical(a, b));
            }
        }
        Ok(Self {
            n,
            edges: set.into_iter().collect(),
            features,
            labels: None,
        })
    }

    /// Graph with identity features.
    pub fn featureless(n: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        Self::new(n, edges, Tensor::identity(n))
    }

    pub fn with_labels(mut self, labels: Labels) -> Result<Self> {
        if labels.columns.iter().any(|c| c.len() != self.n) {
            return Err(Error::Graph("label count differs from node count".into()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Sorted canonical edges.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.binary_search(&canonical(a, b)).is_ok()
    }

    pub fn edge_set(&self) -> HashSet<Edge> {
        self.edges.iter().copied().collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    pub fn mean_degree(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            2.0 * self.edges.len() as f64 / self.n as f64
        }
    }

    /// Symmetric 0/1 adjacency without self-loops.
    pub fn adjacency(&self) -> Tensor {
        let mut a = Tensor::zeros(self.n, self.n);
        for &(u, v) in &self.edges {
            a.set(u, v, 1.0);
            a.set(v, u, 1.0);
        }
        a
    }

    /// Both orientations of every edge, sorted by source, with CSR offsets:
    /// the out-neighbors of `u` are `targets[offsets[u]..offsets[u + 1]]`.
    pub fn neighborhoods(&self) -> Neighborhoods {
        let mut pairs: Vec<Edge> = self
            .edges
            .iter()
            .flat_map(|&(a, b)| [(a, b), (b, a)])
            .collect();
        pairs.sort_unstable();
        let mut offsets = vec![0; self.n + 1];
        for &(s, _) in &pairs {
            offsets[s + 1] += 1;
        }
        for i in 0..self.n {
            offsets[i + 1] += offsets[i];
        }
        Neighborhoods {
            sources: pairs.iter().map(|p| p.0).collect(),
            targets: pairs.iter().map(|p| p.1).collect(),
            offsets,
        }
    }

    /// Same nodes and features with a different edge set.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut g = Self::new(self.n, edges, self.features.clone())?;
        g.labels = self.labels.clone();
        Ok(g)
    }

    /// Divides every feature row by its sum (rows summing to zero are kept).
    pub fn row_normalize_features(&mut self) {
        for i in 0..self.features.rows() {
            let row = self.features.row_mut(i);
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
    }
}

/// Directed view of an undirected graph, grouped by source node.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhoods {
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl Neighborhoods {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }
}

/// Notes produced while loading files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub warnings: Vec<String>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            None
        } else {
            Some((i + 1, l.split_whitespace().collect()))
        }
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Assigns contiguous indices to node tokens: numeric order when every token
/// is an unsigned integer, otherwise first-appearance order.
fn index_tokens(tokens: &[String]) -> HashMap<String, usize> {
    let mut unique: Vec<&String> = Vec::new();
    let mut seen = HashSet::new();
    for t in tokens {
        if seen.insert(t) {
            unique.push(t);
        }
    }
    if unique.iter().all(|t| t.parse::<u64>().is_ok()) {
        unique.sort_by_key(|t| t.parse::<u64>().unwrap());
    }
    unique
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect()
}

/// Maps token pairs to node indices, dropping self-loops, repeats and
/// unknown endpoints with a warning each.
fn resolve_edges(
    raw_edges: &[(usize, String, String)],
    index: &HashMap<String, usize>,
    report: &mut LoadReport,
) -> Vec<Edge> {
    let mut edges = Vec::with_capacity(raw_edges.len());
    let mut seen = HashSet::new();
    let (mut loops, mut dups, mut unknown) = (0usize, 0usize, 0usize);
    for (_, a, b) in raw_edges {
        let (Some(&ia), Some(&ib)) = (index.get(a), index.get(b)) else {
            unknown += 1;
            continue;
        };
        if ia == ib {
            loops += 1;
            continue;
        }
        if !seen.insert(canonical(ia, ib)) {
            dups += 1;
            continue;
        }
        edges.push((ia, ib));
    }
    if loops > 0 {
        report
            .warnings
            .push(format!("dropped {loops} self-loop(s)"));
    }
    if dups > 0 {
        report
            .warnings
            .push(format!("merged {dups} duplicate or reversed edge(s)"));
    }
    if unknown > 0 {
        report.warnings.push(format!(
            "dropped {unknown} edge(s) whose endpoints have no feature row"
        ));
    }

    edges
}

/// Loads a citation network in the LINQS layout: a content file with
/// `paper w1 ... wF class` lines and a citation file with `cited citing`
/// lines. Node order follows the content file.
pub fn load_linqs(content_path: &Path, cites_path: &Path) -> Result<(Graph, LoadReport)> {
    let mut report = LoadReport::default();
    let text = read(content_path)?;
    let mut index = HashMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut classes = Vec::new();
    for (line, toks) in data_lines(&text) {
        if toks.len() < 3 {
            return Err(parse_err(content_path, line, "expected 'paper features... class'"));
        }
        let vals = toks[1..toks.len() - 1]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(content_path, line, e.to_string()))?;
        if rows.first().is_some_and(|r| r.len() != vals.len()) {
            return Err(parse_err(content_path, line, "inconsistent feature count"));
        }
        if index.insert(toks[0].to_string(), rows.len()).is_some() {
            return Err(parse_err(content_path, line, format!("duplicate paper {}", toks[0])));
        }
        rows.push(vals);
        classes.push(toks[toks.len() - 1].to_string());
    }
    let text = read(cites_path)?;
    let mut raw_edges = Vec::new();
    for (line, toks) in data_lines(&text) {
        if toks.len() != 2 {
            return Err(parse_err(cites_path, line, "expected 'cited citing'"));
        }
        raw_edges.push((line, toks[0].to_string(), toks[1].to_string()));
    }
    let edges = resolve_edges(&raw_edges, &index, &mut report);
    let ids = index_tokens(&classes);
    let labels = Labels::single(classes.iter().map(|c| ids[c]).collect());
    let graph = Graph::new(rows.len(), edges, Tensor::from_rows(&rows)?)?.with_labels(labels)?;
    Ok((graph, report))
}

/// Loads a graph from a whitespace-separated edge list, an optional feature
/// file (`node f1 f2 ...` per line) and an optional label file
/// (`node label [label ...]` per line).
///
/// With a feature file, its row order fixes the node indexing and edges that
/// mention unknown nodes are dropped with a warning. Without one, nodes are
/// the endpoints seen in the edge file and features are the identity matrix.
pub fn load_graph(
    edge_path: &Path,
    feature_path: Option<&Path>,
    label_path: Option<&Path>,
) -> Result<(Graph, LoadReport)> {
    let mut report = LoadReport::default();
    let edge_text = read(edge_path)?;
    let mut raw_edges = Vec::new();
    for (line, toks) in data_lines(&edge_text) {
        if toks.len() != 2 {
            return Err(parse_err(
                edge_path,
                line,
                format!("expected 'src dst', found {} fields", toks.len()),
            ));
        }
        raw_edges.push((line, toks[0].to_string(), toks[1].to_string()));
    }

    let (index, features) = match feature_path {
        Some(fp) => {
            let text = read(fp)?;
            let mut ids = Vec::new();
            let mut rows = Vec::new();
            for (line, toks) in data_lines(&text) {
                if toks.len() < 2 {
                    return Err(parse_err(fp, line, "expected node id followed by features"));
                }
                let vals = toks[1..]
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| parse_err(fp, line, e.to_string()))?;
                if let Some(first) = rows.first() {
                    let first: &Vec<f64> = first;
                    if first.len() != vals.len() {
                        return Err(parse_err(
                            fp,
                            line,
                            format!("{} features, expected {}", vals.len(), first.len()),
                        ));
                    }
                }
                ids.push(toks[0].to_string());
                rows.push(vals);
            }
            let mut index = HashMap::new();
            for (i, id) in ids.iter().enumerate() {
                if index.insert(id.clone(), i).is_some() {
                    return Err(Error::Graph(format!("duplicate feature row for node {id}")));
                }
            }
            (index, Some(Tensor::from_rows(&rows)?))
        }
        None => {
            let tokens: Vec<String> = raw_edges
                .iter()
                .flat_map(|(_, a, b)| [a.clone(), b.clone()])
                .collect();
            (index_tokens(&tokens), None)
        }
    };
    let n = index.len();

    let edges = resolve_edges(&raw_edges, &index, &mut report);
    let features = features.unwrap_or_else(|| Tensor::identity(n));
    let mut graph = Graph::new(n, edges, features)?;

    if let Some(lp) = label_path {
        let text = read(lp)?;
        let mut per_node: Vec<Option<Vec<String>>> = vec![None; n];
        let mut width = None;
        for (line, toks) in data_lines(&text) {
            if toks.len() < 2 {
                return Err(parse_err(lp, line, "expected node id followed by labels"));
            }
            let w = toks.len() - 1;
            if *width.get_or_insert(w) != w {
                return Err(parse_err(lp, line, "inconsistent label column count"));
            }
            let Some(&i) = index.get(toks[0]) else {
                return Err(parse_err(lp, line, format!("unknown node {}", toks[0])));
            };
            per_node[i] = Some(toks[1..].iter().map(|s| s.to_string()).collect());
        }
        let width = width.unwrap_or(0);
        let mut columns = Vec::with_capacity(width);
        for c in 0..width {
            let mut col_tokens = Vec::with_capacity(n);
            for (i, row) in per_node.iter().enumerate() {
                let Some(row) = row else {
                    return Err(Error::Graph(format!("node index {i} has no label")));
                };
                col_tokens.push(row[c].clone());
            }
            let ids = index_tokens(&col_tokens);
            columns.push(col_tokens.iter().map(|t| ids[t]).collect());
        }
        graph = graph.with_labels(Labels { columns })?;
    }
    Ok((graph, report))
}

/// Writes `u v` lines, one per edge.
pub fn write_edges(path: &Path, edges: &[Edge]) -> Result<()> {
    let mut out = String::with_capacity(edges.len() * 12);
    for (a, b) in edges {
        out.push_str(&format!("{a} {b}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `node f1 f2 ...` lines.
pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let mut out = String::new();
    for i in 0..features.rows() {
        out.push_str(&i.to_string());
        for v in features.row(i) {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `node l1 l2 ...` lines.
pub fn write_labels(path: &Path, labels: &Labels) -> Result<()> {
    let n = labels.columns.first().map_or(0, Vec::len);
    let mut out = String::new();
    for i in 0..n {
        out.push_str(&i.to_string());
        for c in &labels.columns {
            out.push(' ');
            out.push_str(&c[i].to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Held-out positive and negative pairs for link prediction.
#[derive(Clone, Debug)]
pub struct EdgeSplit {
    pub train: Graph,
    pub val_pos: Vec<Edge>,
    pub val_neg: Vec<Edge>,
    pub test_pos: Vec<Edge>,
    pub test_neg: Vec<Edge>,
}

/// Randomly holds out `floor(|E| * test_frac)` test edges and
/// `floor(|E| * val_frac)` validation edges, each paired with as many sampled
/// non-edges of the full graph.
pub fn split_edges(g: &Graph, val_frac: f64, test_frac: f64, seed: u64) -> Result<EdgeSplit> {
    if !(0.0..1.0).contains(&val_frac)
        || !(0.0..1.0).contains(&test_frac)
        || val_frac + test_frac >= 1.0
    {
        return Err(Error::Invalid(format!(
            "split fractions val={val_frac} test={test_frac} must be non-negative and sum below 1"
        )));
    }
    let m = g.num_edges();
    let n_val = (m as f64 * val_frac).floor() as usize;
    let n_test = (m as f64 * test_frac).floor() as usize;
    let n = g.num_nodes();
    let total_pairs = n * n.saturating_sub(1) / 2;
    let non_edges = total_pairs - m;
    if non_edges < n_val + n_test {
        return Err(Error::Graph(format!(
            "graph too dense: {non_edges} non-edges for {} negatives",
            n_val + n_test
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = g.edges().to_vec();
    shuffled.shuffle(&mut rng);
    let test_pos = shuffled[..n_test].to_vec();
    let val_pos = shuffled[n_test..n_test + n_val].to_vec();
    let train_edges = shuffled[n_test + n_val..].to_vec();

    let negatives = sample_non_edges(g, n_val + n_test, &mut rng);
    let test_neg = negatives[..n_test].to_vec();
    let val_neg = negatives[n_test..].to_vec();

    Ok(EdgeSplit {
        train: g.with_edges(train_edges)?,
        val_pos,
        val_neg,
        test_pos,
        test_neg,
    })
}

/// Distinct uniformly drawn non-edges. Caller guarantees enough exist.
fn sample_non_edges(g: &Graph, count: usize, rng: &mut ChaCha8Rng) -> Vec<Edge> {
    let n = g.num_nodes();
    let edges = g.edge_set();
    let non_edges = n * n.saturating_sub(1) / 2 - edges.len();
    if count == 0 {
        return Vec::new();
    }
    if count * 2 > non_edges {
        // Dense regime: enumerate and shuffle instead of rejecting.
        let mut all: Vec<Edge> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|e| !edges.contains(e))
            .collect();
        all.shuffle(rng);
        all.truncate(count);
        return all;
    }
    let mut chosen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b {
            continue;
        }
        let e = canonical(a, b);
        if edges.contains(&e) || !chosen.insert(e) {
            continue;
        }
        out.push(e);
    }
    out
}
