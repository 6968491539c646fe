//! Graph data model, dataset ingestion, and the sampling / augmentation
//! primitives used to build pre-training views.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::rng_from;

/// Undirected attributed graph. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    sensitive: Option<Vec<usize>>,
}

impl Graph {
    /// Validating constructor. Edge pairs are normalised to `(min, max)` and
    /// deduplicated; self-loops are rejected.
    pub fn new(
        features: Array2<f64>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Vec<usize>,
        num_classes: usize,
        sensitive: Option<Vec<usize>>,
    ) -> Result<Self> {
        let node_count = features.nrows();
        if node_count == 0 {
            return Err(Error::InvalidGraph("graph must have at least one node".into()));
        }
        if labels.len() != node_count {
            return Err(Error::InvalidGraph(format!(
                "{} labels for {node_count} nodes",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes: num_classes });
        }
        if let Some(s) = &sensitive {
            if s.len() != node_count {
                return Err(Error::InvalidGraph(format!(
                    "{} sensitive values for {node_count} nodes",
                    s.len()
                )));
            }
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            for idx in [a, b] {
                if idx >= node_count {
                    return Err(Error::NodeOutOfRange { index: idx, count: node_count });
                }
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop on node {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self {
            node_count,
            edges: set.into_iter().collect(),
            features,
            labels,
            num_classes,
            sensitive,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Sorted unordered pairs `(i, j)` with `i < j`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sensitive(&self) -> Option<&[usize]> {
        self.sensitive.as_deref()
    }

    /// Number of distinct sensitive-attribute classes.
    pub fn sensitive_classes(&self) -> Option<usize> {
        self.sensitive.as_ref().map(|s| s.iter().max().map_or(1, |m| m + 1))
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.binary_search(&(a.min(b), a.max(b))).is_ok()
    }

    /// Symmetric neighbour lists.
    pub fn adjacency(&self) -> Adjacency {
        let mut neighbors = vec![Vec::new(); self.node_count];
        for &(a, b) in &self.edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Adjacency { neighbors }
    }

    fn with_edges(&self, edges: Vec<(usize, usize)>) -> Self {
        let mut edges = edges;
        edges.sort_unstable();
        edges.dedup();
        Self { edges, ..self.clone() }
    }

    fn with_features(&self, features: Array2<f64>) -> Self {
        Self { features, ..self.clone() }
    }

    /// Subgraph induced on `nodes`; returns the graph and the mapping from
    /// local index to original index (ascending).
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<(Graph, Vec<usize>)> {
        let mut mapping: Vec<usize> = nodes.to_vec();
        mapping.sort_unstable();
        mapping.dedup();
        if mapping.is_empty() {
            return Err(Error::EmptyInput("induced subgraph on no nodes".into()));
        }
        if let Some(&bad) = mapping.iter().find(|&&v| v >= self.node_count) {
            return Err(Error::NodeOutOfRange { index: bad, count: self.node_count });
        }
        let mut local = vec![usize::MAX; self.node_count];
        for (i, &v) in mapping.iter().enumerate() {
            local[v] = i;
        }
        let edges = self
            .edges
            .iter()
            .filter(|&&(a, b)| local[a] != usize::MAX && local[b] != usize::MAX)
            .map(|&(a, b)| (local[a], local[b]))
            .collect::<Vec<_>>();
        let features = self.features.select(ndarray::Axis(0), &mapping);
        let labels = mapping.iter().map(|&v| self.labels[v]).collect();
        let sensitive = self.sensitive.as_ref().map(|s| mapping.iter().map(|&v| s[v]).collect());
        let g = Graph {
            node_count: mapping.len(),
            edges: {
                let mut e = edges;
                e.sort_unstable();
                e
            },
            features,
            labels,
            num_classes: self.num_classes,
            sensitive,
        };
        Ok((g, mapping))
    }

    /// Stable content digest (hex SHA-256 prefix).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.node_count as u64).to_le_bytes());
        for &(a, b) in &self.edges {
            h.update((a as u64).to_le_bytes());
            h.update((b as u64).to_le_bytes());
        }
        for v in self.features.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        hex_prefix(&h.finalize())
    }
}

pub(crate) fn hex_prefix(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(32);
    for b in bytes.iter().take(16) {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Incoming neighbour lists; may be asymmetric (query-time perturbed views).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    pub neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }
}

/// Disjoint node pools for the attack pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSplit {
    pub target_train: Vec<usize>,
    pub target_test: Vec<usize>,
    pub shadow_train: Vec<usize>,
    pub shadow_test: Vec<usize>,
    /// Attribute-inference adversary pool (nodes with known sensitive value).
    pub attack_train: Vec<usize>,
    /// Attribute-inference evaluation pool.
    pub attack_test: Vec<usize>,
}

impl NodeSplit {
    pub fn target_pool(&self) -> Vec<usize> {
        union_sorted(&self.target_train, &self.target_test)
    }

    pub fn shadow_pool(&self) -> Vec<usize> {
        union_sorted(&self.shadow_train, &self.shadow_test)
    }

    /// Check index ranges and disjointness. `mia` additionally requires the
    /// shadow pool to be disjoint from the target pool.
    pub fn validate(&self, node_count: usize, mia: bool) -> Result<()> {
        let sets = [
            &self.target_train,
            &self.target_test,
            &self.shadow_train,
            &self.shadow_test,
            &self.attack_train,
            &self.attack_test,
        ];
        for set in sets {
            if let Some(&bad) = set.iter().find(|&&v| v >= node_count) {
                return Err(Error::NodeOutOfRange { index: bad, count: node_count });
            }
        }
        disjoint(&self.target_train, &self.target_test, "target train/test")?;
        disjoint(&self.shadow_train, &self.shadow_test, "shadow train/test")?;
        disjoint(&self.attack_train, &self.attack_test, "attack train/test")?;
        if mia {
            disjoint(&self.shadow_pool(), &self.target_pool(), "shadow/target pools")?;
        }
        Ok(())
    }

    /// Stable digest of every index set.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for set in [
            &self.target_train,
            &self.target_test,
            &self.shadow_train,
            &self.shadow_test,
            &self.attack_train,
            &self.attack_test,
        ] {
            h.update((set.len() as u64).to_le_bytes());
            for &v in set {
                h.update((v as u64).to_le_bytes());
            }
        }
        hex_prefix(&h.finalize())
    }
}

fn union_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = a.iter().chain(b).copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn disjoint(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    let set: HashSet<_> = a.iter().collect();
    match b.iter().find(|v| set.contains(v)) {
        Some(v) => Err(Error::OverlappingPools(format!("{what} share node {v}"))),
        None => Ok(()),
    }
}

/// Fractions used to carve a [`NodeSplit`] out of a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    /// Share of nodes in the target pool.
    pub target: f64,
    /// Share of nodes in the shadow pool.
    pub shadow: f64,
    /// Share of each pool used as the model's training set.
    pub train: f64,
    /// Share of all nodes whose sensitive value the attribute adversary knows.
    pub aia_known: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { target: 0.4, shadow: 0.4, train: 0.5, aia_known: 0.5 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("target", self.target),
            ("shadow", self.shadow),
            ("train", self.train),
            ("aia_known", self.aia_known),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter(format!("split fraction {name}={v} not in (0,1)")));
            }
        }
        if self.target + self.shadow > 1.0 + 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "target + shadow fractions exceed 1 ({} + {})",
                self.target, self.shadow
            )));
        }
        Ok(())
    }

    /// Deterministic split of `n` nodes.
    pub fn split(&self, n: usize, seed: u64) -> Result<NodeSplit> {
        self.validate()?;
        let mut rng = rng_from(seed, "split");
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_target = ((self.target * n as f64).round() as usize).min(n);
        let n_shadow = ((self.shadow * n as f64).round() as usize).min(n - n_target);
        let (target, rest) = order.split_at(n_target);
        let shadow = &rest[..n_shadow];
        let cut = |pool: &[usize]| {
            let k = (self.train * pool.len() as f64).round() as usize;
            let mut a = pool[..k].to_vec();
            let mut b = pool[k..].to_vec();
            a.sort_unstable();
            b.sort_unstable();
            (a, b)
        };
        let (target_train, target_test) = cut(target);
        let (shadow_train, shadow_test) = cut(shadow);

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let k = (self.aia_known * n as f64).round() as usize;
        let mut attack_train = order[..k].to_vec();
        let mut attack_test = order[k..].to_vec();
        attack_train.sort_unstable();
        attack_test.sort_unstable();

        Ok(NodeSplit { target_train, target_test, shadow_train, shadow_test, attack_train, attack_test })
    }
}

/// How a synthetic generator assigns the sensitive attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SensitiveRule {
    #[default]
    Block,
    Label,
    None,
}

/// Stochastic-block-model generator with class-topic binary features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub blocks: Vec<usize>,
    pub p_intra: f64,
    pub p_inter: f64,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Probability a node's label is redrawn uniformly instead of following its block.
    pub label_noise: f64,
    /// Probability a feature in the node's class topic is on.
    pub feature_on: f64,
    /// Probability any other feature is on.
    pub feature_off: f64,
    pub sensitive: SensitiveRule,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            blocks: vec![50, 50],
            p_intra: 0.2,
            p_inter: 0.02,
            feature_dim: 64,
            num_classes: 2,
            label_noise: 0.0,
            feature_on: 0.3,
            feature_off: 0.05,
            sensitive: SensitiveRule::Block,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::InvalidParameter("synthetic blocks must be nonempty and positive".into()));
        }
        for (name, p) in [
            ("p_intra", self.p_intra),
            ("p_inter", self.p_inter),
            ("label_noise", self.label_noise),
            ("feature_on", self.feature_on),
            ("feature_off", self.feature_off),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("{name}={p} not in [0,1]")));
            }
        }
        if self.feature_dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidParameter("feature_dim and num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Block id of every node.
    pub fn block_of(&self) -> Vec<usize> {
        self.blocks.iter().enumerate().flat_map(|(b, &size)| std::iter::repeat_n(b, size)).collect()
    }

    pub fn generate(&self, seed: u64) -> Result<Graph> {
        self.validate()?;
        let mut rng = rng_from(seed, "synthetic");
        let block = self.block_of();
        let n = block.len();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let p = if block[i] == block[j] { self.p_intra } else { self.p_inter };
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        let c = self.num_classes;
        let labels: Vec<usize> = block
            .iter()
            .map(|&b| {
                if self.label_noise > 0.0 && rng.random::<f64>() < self.label_noise {
                    rng.random_range(0..c)
                } else {
                    b % c
                }
            })
            .collect();
        let features = Array2::from_shape_fn((n, self.feature_dim), |(i, f)| {
            let p = if f % c == labels[i] { self.feature_on } else { self.feature_off };
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        });
        let sensitive = match self.sensitive {
            SensitiveRule::Block => Some(block),
            SensitiveRule::Label => Some(labels.clone()),
            SensitiveRule::None => None,
        };
        Graph::new(features, edges, labels, c, sensitive)
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Directory holding `edges.tsv`, `features.tsv`, `labels.tsv` and optionally `sensitive.tsv`.
    Directory { path: PathBuf },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub source: DatasetSource,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub seed: u64,
}

/// Resolve a dataset directory, honouring `PROIA_DATA_DIR` for relative paths.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("PROIA_DATA_DIR") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

/// Load (or generate) a graph and carve its node split.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Graph, NodeSplit)> {
    spec.split.validate()?;
    let graph = match &spec.source {
        DatasetSource::Directory { path } => read_dataset_dir(&resolve_data_path(path))?,
        DatasetSource::Synthetic(syn) => syn.generate(spec.seed)?,
    };
    let split = spec.split.split(graph.node_count(), spec.seed)?;
    Ok((graph, split))
}

fn parse_err(file: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Dataset(format!("{}:{}: {msg}", file.display(), line + 1))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn read_index_column(path: &Path) -> Result<Vec<usize>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, l)| l.parse::<usize>().map_err(|e| parse_err(path, i, e)))
        .collect()
}

/// Read the tab-separated dataset directory layout.
pub fn read_dataset_dir(dir: &Path) -> Result<Graph> {
    let feat_path = dir.join("features.tsv");
    let rows: Vec<Vec<f64>> = read_lines(&feat_path)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.split('\t')
                .map(|t| t.trim().parse::<f64>().map_err(|e| parse_err(&feat_path, i, e)))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    if n == 0 {
        return Err(Error::Dataset(format!("{} has no rows", feat_path.display())));
    }
    let dim = rows[0].len();
    if let Some(i) = rows.iter().position(|r| r.len() != dim) {
        return Err(parse_err(&feat_path, i, format!("expected {dim} columns")));
    }
    let features = Array2::from_shape_vec((n, dim), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Dataset(e.to_string()))?;

    let edge_path = dir.join("edges.tsv");
    let edge_lines = read_lines(&edge_path)?;
    if edge_lines.is_empty() {
        return Err(Error::Dataset(format!("{} contains no edges", edge_path.display())));
    }
    let mut edges = Vec::with_capacity(edge_lines.len());
    for (i, l) in edge_lines.iter().enumerate() {
        let mut parts = l.split('\t');
        let mut next = || -> Result<usize> {
            parts
                .next()
                .ok_or_else(|| parse_err(&edge_path, i, "expected two columns"))?
                .trim()
                .parse::<usize>()
                .map_err(|e| parse_err(&edge_path, i, e))
        };
        let (a, b) = (next()?, next()?);
        if a == b {
            continue;
        }
        edges.push((a, b));
    }

    let labels = read_index_column(&dir.join("labels.tsv"))?;
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    let sens_path = dir.join("sensitive.tsv");
    let sensitive = if sens_path.exists() { Some(read_index_column(&sens_path)?) } else { None };
    Graph::new(features, edges, labels, num_classes, sensitive)
}

/// Write a graph in the directory layout read by [`read_dataset_dir`].
pub fn write_dataset_dir(g: &Graph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut s = String::new();
    for &(a, b) in g.edges() {
        let _ = writeln!(s, "{a}\t{b}");
    }
    fs::write(dir.join("edges.tsv"), s)?;
    let mut s = String::new();
    for row in g.features().rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(s, "{}", cells.join("\t"));
    }
    fs::write(dir.join("features.tsv"), s)?;
    let col = |v: &[usize]| v.iter().map(|x| format!("{x}\n")).collect::<String>();
    fs::write(dir.join("labels.tsv"), col(g.labels()))?;
    if let Some(sens) = g.sensitive() {
        fs::write(dir.join("sensitive.tsv"), col(sens))?;
    }
    Ok(())
}

fn support<'a>(x: impl IntoIterator<Item = &'a f64>) -> Vec<usize> {
    x.into_iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect()
}

fn sorted_jaccard(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Jaccard similarity of the nonzero supports; 0 when both supports are empty.
pub fn jaccard_similarity(x_i: &[f64], x_j: &[f64]) -> Result<f64> {
    if x_i.len() != x_j.len() {
        return Err(Error::DimensionMismatch(format!(
            "jaccard on vectors of length {} and {}",
            x_i.len(),
            x_j.len()
        )));
    }
    Ok(sorted_jaccard(&support(x_i), &support(x_j)))
}

/// Keep only the existing edges whose endpoint feature similarity is at least `threshold`.
pub fn build_local_subgraph(g: &Graph, threshold: f64) -> Result<Graph> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidParameter(format!("similarity threshold {threshold} < 0")));
    }
    let supports: Vec<Vec<usize>> =
        g.features().rows().into_iter().map(|r| support(r.iter())).collect();
    let kept = g
        .edges()
        .iter()
        .copied()
        .filter(|&(a, b)| sorted_jaccard(&supports[a], &supports[b]) >= threshold)
        .collect();
    Ok(g.with_edges(kept))
}

/// Add every absent node pair independently with probability `q`.
pub fn bernoulli_augment(g: &Graph, q: f64, seed: u64) -> Result<Graph> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidParameter(format!("bernoulli probability {q} not in [0,1]")));
    }
    let n = g.node_count();
    let mut edges = g.edges().to_vec();
    if q == 0.0 || n < 2 {
        return Ok(g.clone());
    }
    let total = n * (n - 1) / 2;
    let mut rng = rng_from(seed, "bernoulli");
    // Walk pair indices with geometric skips; pair k maps to (i, j), i < j, row-major.
    let log_fail = (1.0 - q).ln();
    let mut k: usize = 0;
    let (mut i, mut row_start) = (0usize, 0usize);
    loop {
        if q < 1.0 {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let skip = (u.ln() / log_fail).floor();
            if skip >= (total - k) as f64 {
                break;
            }
            k += skip as usize;
        }
        if k >= total {
            break;
        }
        while k >= row_start + (n - 1 - i) {
            row_start += n - 1 - i;
            i += 1;
        }
        let j = i + 1 + (k - row_start);
        if !g.has_edge(i, j) {
            edges.push((i, j));
        }
        k += 1;
    }
    Ok(g.with_edges(edges))
}

/// Permute feature rows uniformly at random; structure and labels are untouched.
pub fn shuffle_features(g: &Graph, seed: u64) -> Graph {
    let mut perm: Vec<usize> = (0..g.node_count()).collect();
    perm.shuffle(&mut rng_from(seed, "shuffle"));
    g.with_features(g.features().select(ndarray::Axis(0), &perm))
}

/// Nodes within `k` hops of `v`, ascending.
pub fn khop_nodes(adj: &Adjacency, v: usize, k: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; adj.node_count()];
    let mut queue = VecDeque::from([v]);
    dist[v] = 0;
    let mut out = vec![v];
    while let Some(u) = queue.pop_front() {
        if dist[u] == k {
            continue;
        }
        for &w in &adj.neighbors[u] {
            if dist[w] == usize::MAX {
                dist[w] = dist[u] + 1;
                out.push(w);
                queue.push_back(w);
            }
        }
    }
    out.sort_unstable();
    out
}

/// Induced subgraph on the `k`-hop neighbourhood of `v`, with the mapping back
/// to original indices.
pub fn khop_subgraph(g: &Graph, v: usize, k: usize) -> Result<(Graph, Vec<usize>)> {
    if v >= g.node_count() {
        return Err(Error::NodeOutOfRange { index: v, count: g.node_count() });
    }
    g.induced_subgraph(&khop_nodes(&g.adjacency(), v, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn path4() -> Graph {
        Graph::new(Array2::eye(4), [(0, 1), (1, 2), (2, 3)], vec![0, 1, 0, 1], 2, None).unwrap()
    }

    #[test]
    fn graph_rejects_bad_input() {
        let f = Array2::zeros((2, 3));
        assert!(matches!(
            Graph::new(f.clone(), [(0, 5)], vec![0, 0], 1, None),
            Err(Error::NodeOutOfRange { index: 5, count: 2 })
        ));
        assert!(Graph::new(f.clone(), [(1, 1)], vec![0, 0], 1, None).is_err());
        assert!(Graph::new(f.clone(), [], vec![0], 1, None).is_err());
        assert!(Graph::new(f.clone(), [], vec![0, 2], 2, None).is_err());
        assert!(Graph::new(f, [], vec![0, 0], 1, Some(vec![1])).is_err());
    }

    #[test]
    fn edges_are_normalised_and_deduplicated() {
        let g = Graph::new(Array2::zeros((3, 1)), [(2, 0), (0, 2), (1, 2)], vec![0; 3], 1, None).unwrap();
        assert_eq!(g.edges(), &[(0, 2), (1, 2)]);
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard_similarity(&[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(jaccard_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = jaccard_similarity(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard_similarity(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(jaccard_similarity(&[1.0], &[1.0, 0.0]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn local_subgraph_examples() {
        let f = array![[1.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let g = Graph::new(f, [(0, 1), (1, 2)], vec![0; 3], 1, None).unwrap();
        assert_eq!(build_local_subgraph(&g, 0.5).unwrap().edges(), &[(0, 1)]);
        assert_eq!(build_local_subgraph(&g, 0.0).unwrap().edges(), g.edges());
        assert!(build_local_subgraph(&g, 1.01).unwrap().edges().is_empty());
        assert!(build_local_subgraph(&g, -0.1).is_err());
    }

    #[test]
    fn bernoulli_extremes() {
        let g = path4();
        assert_eq!(bernoulli_augment(&g, 0.0, 1).unwrap().edges(), g.edges());
        assert_eq!(bernoulli_augment(&g, 1.0, 1).unwrap().edge_count(), 6);
        assert!(bernoulli_augment(&g, 1.5, 1).is_err());
    }

    #[test]
    fn shuffle_single_node_is_identity() {
        let g = Graph::new(array![[1.0, 2.0]], [], vec![0], 1, None).unwrap();
        assert_eq!(shuffle_features(&g, 3), g);
    }

    #[test]
    fn khop_examples() {
        let g = path4();
        let (sub, map) = khop_subgraph(&g, 1, 1).unwrap();
        assert_eq!(map, vec![0, 1, 2]);
        assert_eq!(sub.edges(), &[(0, 1), (1, 2)]);
        let (sub0, map0) = khop_subgraph(&g, 2, 0).unwrap();
        assert_eq!((map0, sub0.edge_count()), (vec![2], 0));
        let (_, all) = khop_subgraph(&g, 0, 10).unwrap();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(khop_subgraph(&g, 9, 1).is_err());
    }

    #[test]
    fn synthetic_two_block_graph() {
        let spec = SyntheticSpec { blocks: vec![50, 50], p_intra: 0.2, p_inter: 0.02, ..Default::default() };
        let g = spec.generate(11).unwrap();
        assert_eq!(g.node_count(), 100);
        let s = g.sensitive().unwrap();
        assert!(s[..50].iter().all(|&b| b == 0) && s[50..].iter().all(|&b| b == 1));
        let intra = g.edges().iter().filter(|&&(a, b)| s[a] == s[b]).count();
        assert!(intra > g.edge_count() / 2);
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let f = SplitFractions::default();
        let a = f.split(300, 5).unwrap();
        a.validate(300, true).unwrap();
        assert_eq!(a, f.split(300, 5).unwrap());
        assert_ne!(a, f.split(300, 6).unwrap());
        assert_eq!(a.target_train.len() + a.target_test.len(), 120);
        assert_eq!(a.attack_train.len() + a.attack_test.len(), 300);
        assert!(SplitFractions { target: 0.7, shadow: 0.7, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn directory_roundtrip_and_empty_edges() {
        let dir = tempfile::tempdir().unwrap();
        let g = SyntheticSpec::default().generate(2).unwrap();
        write_dataset_dir(&g, dir.path()).unwrap();
        assert_eq!(read_dataset_dir(dir.path()).unwrap(), g);
        fs::write(dir.path().join("edges.tsv"), "").unwrap();
        assert!(matches!(read_dataset_dir(dir.path()), Err(Error::Dataset(_))));
    }
}
