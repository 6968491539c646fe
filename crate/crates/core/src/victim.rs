//! Target and shadow node classifiers and their posterior query interface.
//!
//! Three full-batch backbones are provided: symmetric-normalised mean
//! aggregation (GCN-like), single-head additive attention (GAT-like) and
//! self plus neighbourhood-mean concatenation (SAGE-like).
//!
//! Prompt conditioning multiplies the first layer's transformed features
//! element-wise by each node's prompt vector, mapped to the layer width by a
//! fixed averaging projection that sends the all-ones vector to all-ones.

use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Csr, Edges, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Adjacency, Graph};
use crate::nn::{argmax_rows, ensure_finite, glorot, rng_from, Adam, Params};
use crate::persist;
use crate::pretrain::PromptFeature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    Gcn,
    Gat,
    Sage,
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackboneKind::Gcn => "gcn",
            BackboneKind::Gat => "gat",
            BackboneKind::Sage => "sage",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub layers: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Condition on prompts while training as well as when querying.
    pub condition_training: bool,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Gcn,
            layers: 2,
            hidden_dim: 256,
            learning_rate: 1e-4,
            epochs: 200,
            weight_decay: 0.0,
            condition_training: true,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidParameter("backbone needs at least one layer".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::InvalidParameter("hidden_dim must be positive".into()));
        }
        Ok(())
    }

    /// Output width of layer `l` (0-based).
    fn width(&self, l: usize, num_classes: usize) -> usize {
        if l + 1 == self.layers {
            num_classes
        } else {
            self.hidden_dim
        }
    }
}

/// A trained (or untrained) classifier together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHandle {
    pub spec: BackboneSpec,
    pub params: Params,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Prompt width seen during training, when trained with conditioning.
    pub prompt_dim: Option<usize>,
    /// Digest of the training graph and training node set.
    pub fingerprint: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct HandleMeta {
    spec: BackboneSpec,
    feature_dim: usize,
    num_classes: usize,
    prompt_dim: Option<usize>,
    fingerprint: String,
    train_accuracy: f64,
    test_accuracy: f64,
    seed: u64,
}

/// Digest binding a graph to the node set a model was trained on.
pub fn fingerprint(g: &Graph, train_nodes: &[usize]) -> String {
    let mut bytes = g.fingerprint().into_bytes();
    for &v in train_nodes {
        bytes.extend_from_slice(&(v as u64).to_le_bytes());
    }
    persist::digest_bytes(&bytes)
}

/// Fixed linear map from prompt width to `width`: output column `j` averages a
/// contiguous block of prompt columns. All-ones rows map to all-ones rows.
pub fn project_prompt(prompt: &Array2<f64>, width: usize) -> Array2<f64> {
    let dp = prompt.ncols();
    if dp == width {
        return prompt.clone();
    }
    let mut out = Array2::zeros((prompt.nrows(), width));
    for j in 0..width {
        let lo = j * dp / width;
        let hi = ((j + 1) * dp).div_ceil(width).max(lo + 1);
        let w = 1.0 / (hi - lo) as f64;
        for i in 0..prompt.nrows() {
            out[[i, j]] = (lo..hi).map(|c| prompt[[i, c]]).sum::<f64>() * w;
        }
    }
    out
}

/// Message-passing structures for one adjacency.
struct Structure {
    features: Rc<Csr>,
    gcn: Option<Rc<Csr>>,
    gat: Option<(Rc<Edges>, Rc<Vec<usize>>, Rc<Vec<usize>>)>,
    sage: Option<Rc<Csr>>,
}

impl Structure {
    fn new(kind: BackboneKind, features: &Array2<f64>, adj: &Adjacency) -> Self {
        let n = adj.node_count();
        let mut s = Structure { features: Rc::new(Csr::from_dense(features)), gcn: None, gat: None, sage: None };
        match kind {
            BackboneKind::Gcn => {
                let d: Vec<f64> = (0..n).map(|v| (adj.degree(v) + 1) as f64).collect();
                let mut t = Vec::new();
                for v in 0..n {
                    t.push((v, v, 1.0 / d[v]));
                    for &u in &adj.neighbors[v] {
                        t.push((v, u, 1.0 / (d[v] * d[u]).sqrt()));
                    }
                }
                s.gcn = Some(Rc::new(Csr::from_triplets(n, n, t)));
            }
            BackboneKind::Gat => {
                let (mut dst, mut src) = (Vec::new(), Vec::new());
                for v in 0..n {
                    dst.push(v);
                    src.push(v);
                    for &u in &adj.neighbors[v] {
                        dst.push(v);
                        src.push(u);
                    }
                }
                let edges = Rc::new(Edges::new(dst.clone(), src.clone(), n));
                s.gat = Some((edges, Rc::new(dst), Rc::new(src)));
            }
            BackboneKind::Sage => {
                let mut t = Vec::new();
                for v in 0..n {
                    let deg = adj.degree(v);
                    for &u in &adj.neighbors[v] {
                        t.push((v, u, 1.0 / deg as f64));
                    }
                }
                s.sage = Some(Rc::new(Csr::from_triplets(n, n, t)));
            }
        }
        s
    }
}

fn init_params(spec: &BackboneSpec, feature_dim: usize, num_classes: usize, seed: u64) -> Params {
    let mut rng = rng_from(seed, "victim-init");
    let mut p = Params::new();
    let mut d_in = feature_dim;
    for l in 0..spec.layers {
        let d_out = spec.width(l, num_classes);
        match spec.kind {
            BackboneKind::Gcn => {
                p.push(format!("w_{l}"), glorot(d_in, d_out, &mut rng));
            }
            BackboneKind::Gat => {
                p.push(format!("w_{l}"), glorot(d_in, d_out, &mut rng));
                p.push(format!("att_dst_{l}"), glorot(d_out, 1, &mut rng));
                p.push(format!("att_src_{l}"), glorot(d_out, 1, &mut rng));
            }
            BackboneKind::Sage => {
                p.push(format!("w_self_{l}"), glorot(d_in, d_out, &mut rng));
                p.push(format!("w_neigh_{l}"), glorot(d_in, d_out, &mut rng));
            }
        }
        p.push(format!("b_{l}"), Array2::zeros((1, d_out)));
        d_in = d_out;
    }
    p
}

/// Logits for every node of the structure.
fn forward(spec: &BackboneSpec, t: &mut Tape, pv: &[Var], s: &Structure, gate: Option<&Array2<f64>>) -> Var {
    let per_layer = match spec.kind {
        BackboneKind::Gcn => 2,
        BackboneKind::Gat => 4,
        BackboneKind::Sage => 3,
    };
    let mut h: Option<Var> = None;
    for l in 0..spec.layers {
        let slots = &pv[l * per_layer..(l + 1) * per_layer];
        let transform = |t: &mut Tape, h: Option<Var>, w: Var| -> Var {
            let z = match h {
                None => t.spmm(s.features.clone(), w),
                Some(h) => t.matmul(h, w),
            };
            match (l, gate) {
                (0, Some(g)) => {
                    let g = t.constant(g.clone());
                    t.mul(z, g)
                }
                _ => z,
            }
        };
        let out = match spec.kind {
            BackboneKind::Gcn => {
                let z = transform(t, h, slots[0]);
                let agg = t.spmm(s.gcn.clone().expect("gcn structure"), z);
                t.add(agg, slots[1])
            }
            BackboneKind::Gat => {
                let (edges, dst, src) = s.gat.clone().expect("gat structure");
                let z = transform(t, h, slots[0]);
                let sd = t.matmul(z, slots[1]);
                let ss = t.matmul(z, slots[2]);
                let gd = t.gather_rows(sd, dst);
                let gs = t.gather_rows(ss, src);
                let e = t.add(gd, gs);
                let e = t.leaky_relu(e, 0.2);
                let alpha = t.edge_softmax(e, edges.clone());
                let agg = t.edge_aggregate(alpha, z, edges);
                t.add(agg, slots[3])
            }
            BackboneKind::Sage => {
                let zs = transform(t, h, slots[0]);
                let zn = transform(t, h, slots[1]);
                let mean = t.spmm(s.sage.clone().expect("sage structure"), zn);
                let sum = t.add(zs, mean);
                t.add(sum, slots[2])
            }
        };
        h = Some(if l + 1 == spec.layers { out } else { t.relu(out) });
    }
    h.expect("at least one layer")
}

fn check_prompt(prompt: &PromptFeature, n: usize) -> Result<()> {
    if prompt.matrix.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "prompt has {} rows for a graph with {n} nodes",
            prompt.matrix.nrows()
        )));
    }
    if prompt.dim() == 0 {
        return Err(Error::DimensionMismatch("prompt has zero width".into()));
    }
    Ok(())
}

fn accuracy_on(probs: &Array2<f64>, labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return f64::NAN;
    }
    let pred = argmax_rows(probs);
    nodes.iter().filter(|&&v| pred[v] == labels[v]).count() as f64 / nodes.len() as f64
}

/// Train a classifier on `train_nodes` of `g`. `prompt`, when given, must
/// have one row per node of `g` and is used for conditioning during training
/// if the spec asks for it.
pub fn train_victim(
    g: &Graph,
    train_nodes: &[usize],
    spec: &BackboneSpec,
    prompt: Option<&PromptFeature>,
    seed: u64,
) -> Result<ModelHandle> {
    spec.validate()?;
    if train_nodes.is_empty() {
        return Err(Error::EmptyInput("victim training set is empty".into()));
    }
    let n = g.node_count();
    if let Some(&bad) = train_nodes.iter().find(|&&v| v >= n) {
        return Err(Error::NodeOutOfRange { index: bad, count: n });
    }
    let prompt = if spec.condition_training { prompt } else { None };
    if let Some(p) = prompt {
        check_prompt(p, n)?;
    }
    let width = spec.width(0, g.num_classes());
    let gate = prompt.map(|p| project_prompt(&p.matrix, width));
    let structure = Structure::new(spec.kind, g.features(), &g.adjacency());
    let mut params = init_params(spec, g.feature_dim(), g.num_classes(), seed);
    let mut opt = Adam::new(&params, spec.learning_rate, spec.weight_decay);
    let nodes = Rc::new(train_nodes.to_vec());
    let labels = Rc::new(train_nodes.iter().map(|&v| g.labels()[v]).collect::<Vec<_>>());
    for epoch in 0..spec.epochs {
        let mut t = Tape::new();
        let pv = params.register(&mut t);
        let logits = forward(spec, &mut t, &pv, &structure, gate.as_ref());
        let picked = t.gather_rows(logits, nodes.clone());
        let loss = t.cross_entropy(picked, labels.clone());
        ensure_finite(t.item(loss), epoch, "victim")?;
        let mut grads = t.backward(loss);
        let grads = params.collect_grads(&pv, &mut grads);
        opt.step(&mut params, &grads);
        if !params.all_finite() {
            return Err(Error::Diverged { epoch, what: "non-finite victim parameters".into() });
        }
    }
    let mut handle = ModelHandle {
        spec: spec.clone(),
        params,
        feature_dim: g.feature_dim(),
        num_classes: g.num_classes(),
        prompt_dim: prompt.map(PromptFeature::dim),
        fingerprint: fingerprint(g, train_nodes),
        train_accuracy: 0.0,
        test_accuracy: 0.0,
        seed,
    };
    let mut t = Tape::new();
    let pv = handle.params.register_frozen(&mut t);
    let logits = forward(spec, &mut t, &pv, &structure, gate.as_ref());
    let probs = t.softmax(logits);
    let probs = t.value(probs);
    let in_train: std::collections::HashSet<usize> = train_nodes.iter().copied().collect();
    let test: Vec<usize> = (0..n).filter(|v| !in_train.contains(v)).collect();
    handle.train_accuracy = accuracy_on(probs, g.labels(), train_nodes);
    handle.test_accuracy = accuracy_on(probs, g.labels(), &test);
    Ok(handle)
}

/// Posterior rows for `nodes` on `g` with its own structure.
pub fn query_posteriors(
    m: &ModelHandle,
    g: &Graph,
    nodes: &[usize],
    prompt: Option<&PromptFeature>,
) -> Result<Array2<f64>> {
    query_posteriors_with(m, g, &g.adjacency(), nodes, prompt)
}

/// Posterior rows for `nodes` using `adj` as the message-passing structure.
pub fn query_posteriors_with(
    m: &ModelHandle,
    g: &Graph,
    adj: &Adjacency,
    nodes: &[usize],
    prompt: Option<&PromptFeature>,
) -> Result<Array2<f64>> {
    let n = g.node_count();
    if adj.node_count() != n {
        return Err(Error::DimensionMismatch(format!("adjacency over {} nodes for a graph of {n}", adj.node_count())));
    }
    if g.feature_dim() != m.feature_dim {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} features, graph has {}",
            m.feature_dim,
            g.feature_dim()
        )));
    }
    if let Some(&bad) = nodes.iter().find(|&&v| v >= n) {
        return Err(Error::NodeOutOfRange { index: bad, count: n });
    }
    if let Some(p) = prompt {
        check_prompt(p, n)?;
        if let Some(dp) = m.prompt_dim {
            if p.dim() != dp {
                return Err(Error::DimensionMismatch(format!(
                    "model was conditioned on width-{dp} prompts, got width {}",
                    p.dim()
                )));
            }
        }
    }
    let width = m.spec.width(0, m.num_classes);
    let gate = prompt.map(|p| project_prompt(&p.matrix, width));
    let structure = Structure::new(m.spec.kind, g.features(), adj);
    let mut t = Tape::new();
    let pv = m.params.register_frozen(&mut t);
    let logits = forward(&m.spec, &mut t, &pv, &structure, gate.as_ref());
    let picked = t.gather_rows(logits, Rc::new(nodes.to_vec()));
    let probs = t.softmax(picked);
    Ok(t.value(probs).clone())
}

impl ModelHandle {
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        persist::write_params(&dir.join(format!("{name}.bin")), &self.params)?;
        let meta = HandleMeta {
            spec: self.spec.clone(),
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            prompt_dim: self.prompt_dim,
            fingerprint: self.fingerprint.clone(),
            train_accuracy: self.train_accuracy,
            test_accuracy: self.test_accuracy,
            seed: self.seed,
        };
        persist::write_toml(&dir.join(format!("{name}.toml")), &meta)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let meta: HandleMeta = persist::read_toml(&dir.join(format!("{name}.toml")))?;
        let params = persist::read_params(&dir.join(format!("{name}.bin")))?;
        let expected = init_params(&meta.spec, meta.feature_dim, meta.num_classes, 0);
        if expected.names() != params.names() || expected.values().iter().zip(params.values()).any(|(a, b)| a.dim() != b.dim()) {
            return Err(Error::Format(format!("{name}.bin does not match its metadata")));
        }
        Ok(ModelHandle {
            spec: meta.spec,
            params,
            feature_dim: meta.feature_dim,
            num_classes: meta.num_classes,
            prompt_dim: meta.prompt_dim,
            fingerprint: meta.fingerprint,
            train_accuracy: meta.train_accuracy,
            test_accuracy: meta.test_accuracy,
            seed: meta.seed,
        })
    }
}
