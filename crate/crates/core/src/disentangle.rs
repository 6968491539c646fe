//! Disentangled attack head.
//!
//! Each attack row is gated by an MLP of its prompt vector, mapped into
//! `channels` unit-norm slots, and refined by neighbour routing over a
//! mutual-kNN graph of attack-training rows: per channel, neighbour slots are
//! weighted by `softmax(similarity / tau)` against the current centre and the
//! centre becomes the normalised sum of the slot and that aggregate. `depth`
//! such layers are stacked. The concatenated, normalised channels `dt` feed
//! two heads: the attack classifier on `dt * Linear(h)` and a channel
//! classifier `softmax(W dt + b)`. Training minimises both cross-entropies plus
//! `lambda * KL(attack || channel)`.
//!
//! A plain MLP head on the raw rows is provided for the non-disentangled
//! variants.

use std::cmp::Ordering;
use std::path::Path;
use std::rc::Rc;

use ndarray::{concatenate, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::attack_data::AttackDataset;
use crate::autodiff::{Edges, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, glorot, rng_from, Activation, Adam, Params};
use crate::persist;

/// Added to norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisentangleConfig {
    pub channels: usize,
    pub routing_iters: usize,
    pub tau: f64,
    pub lambda: f64,
    pub depth: usize,
    /// Working embedding width; must be a multiple of `channels`.
    pub dim: usize,
    pub prompt_hidden: usize,
    pub head_hidden: usize,
    /// Neighbours per row in the routing graph.
    pub knn: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DisentangleConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            routing_iters: 3,
            tau: 1.0,
            lambda: 1.0,
            depth: 5,
            dim: 32,
            prompt_hidden: 32,
            head_hidden: 32,
            knn: 10,
            activation: Activation::Tanh,
            learning_rate: 0.01,
            weight_decay: 0.0,
            epochs: 100,
            seed: 0,
        }
    }
}

impl DisentangleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.dim == 0 || self.dim % self.channels != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} channels do not divide embedding width {}",
                self.channels, self.dim
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau={} must be positive", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!("lambda={} must be nonnegative", self.lambda)));
        }
        if self.routing_iters == 0 || self.depth == 0 {
            return Err(Error::InvalidParameter("routing_iters and depth must be positive".into()));
        }
        Ok(())
    }
}

/// Plain MLP attack head settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { hidden: 64, learning_rate: 0.01, weight_decay: 0.0, epochs: 100, seed: 0 }
    }
}

fn unit(v: Array1<f64>, what: &str) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if norm <= NORM_EPS {
        return Err(Error::Degenerate(format!("{what} has zero norm")));
    }
    Ok(v / norm)
}

/// Parameters of a single-row channel mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    /// Prompt gate `relu(p W1 + b1) W2 + b2`.
    pub gate_w1: Array2<f64>,
    pub gate_b1: Array1<f64>,
    pub gate_w2: Array2<f64>,
    pub gate_b2: Array1<f64>,
    /// Per-channel projections `W_k` (`m x d/k`) and biases.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub activation: Activation,
}

impl ChannelParams {
    pub fn gate(&self, p: &Array1<f64>) -> Array1<f64> {
        let hidden = (p.dot(&self.gate_w1) + &self.gate_b1).mapv(|v| v.max(0.0));
        hidden.dot(&self.gate_w2) + &self.gate_b2
    }
}

/// Unit-norm channel slots `normalize(act(W_k^T (gate(p) * h) + b_k))`.
pub fn channel_map(p: &Array1<f64>, h: &Array1<f64>, params: &ChannelParams) -> Result<Vec<Array1<f64>>> {
    let g = params.gate(p);
    if g.len() != h.len() {
        return Err(Error::DimensionMismatch(format!("gate width {} vs feature width {}", g.len(), h.len())));
    }
    let u = &g * h;
    params
        .weights
        .iter()
        .zip(&params.biases)
        .map(|(w, b)| {
            if w.nrows() != u.len() || w.ncols() != b.len() {
                return Err(Error::DimensionMismatch(format!("channel weight {:?} for input {}", w.dim(), u.len())));
            }
            let z = (u.dot(w) + b).mapv(|v| params.activation.eval(v));
            unit(z, "channel slot")
        })
        .collect()
}

/// One routing step for a single slot: the similarity-softmax weighted sum
/// of neighbour slots and the weights used.
pub fn routing_step(center: &Array1<f64>, neighbors: &[Array1<f64>], tau: f64) -> Result<(Array1<f64>, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau={tau} must be positive")));
    }
    if neighbors.is_empty() {
        return Ok((Array1::zeros(center.len()), Vec::new()));
    }
    let sims: Vec<f64> = neighbors.iter().map(|z| z.dot(center) / tau).collect();
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut agg = Array1::zeros(center.len());
    for (w, z) in weights.iter().zip(neighbors) {
        agg.scaled_add(*w, z);
    }
    Ok((agg, weights))
}

/// `(z + z_hat) / |z + z_hat|`.
pub fn update_rep(z: &Array1<f64>, z_hat: &Array1<f64>) -> Result<Array1<f64>> {
    unit(z + z_hat, "routed representation")
}

/// Routing on the tape for every channel. Edge `e` lets row `src[e]` vote for
/// row `dst[e]`.
fn route_tape(t: &mut Tape, slots: &[Var], edges: &Rc<Edges>, iters: usize, tau: f64) -> Vec<Var> {
    let dst = Rc::new(edges.dst.clone());
    let src = Rc::new(edges.src.clone());
    slots
        .iter()
        .map(|&z| {
            let mut c = z;
            for _ in 0..iters {
                let zs = t.gather_rows(z, src.clone());
                let cd = t.gather_rows(c, dst.clone());
                let sim = t.row_dot(zs, cd);
                let sim = t.scale(sim, 1.0 / tau);
                let w = t.edge_softmax(sim, edges.clone());
                let agg = t.edge_aggregate(w, z, edges.clone());
                let sum = t.add(z, agg);
                c = t.row_normalize(sum, NORM_EPS);
            }
            c
        })
        .collect()
}

fn edges_from_lists(neighbors: &[Vec<usize>]) -> Rc<Edges> {
    let (mut dst, mut src) = (Vec::new(), Vec::new());
    for (i, list) in neighbors.iter().enumerate() {
        for &j in list {
            dst.push(i);
            src.push(j);
        }
    }
    Rc::new(Edges::new(dst, src, neighbors.len()))
}

/// Route unit-norm channel slots (`slots[k]` is `n x d/k`) over neighbour
/// lists for `iters` iterations. A row whose update cancels exactly comes back as zero.
pub fn route(slots: &[Array2<f64>], neighbors: &[Vec<usize>], iters: usize, tau: f64) -> Result<Vec<Array2<f64>>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau={tau} must be positive")));
    }
    let n = neighbors.len();
    for s in slots {
        if s.nrows() != n {
            return Err(Error::DimensionMismatch(format!("{} slot rows for {n} neighbour lists", s.nrows())));
        }
    }
    if let Some(&bad) = neighbors.iter().flatten().find(|&&j| j >= n) {
        return Err(Error::NodeOutOfRange { index: bad, count: n });
    }
    let mut t = Tape::new();
    let vars: Vec<Var> = slots.iter().map(|s| t.constant(s.clone())).collect();
    let out = route_tape(&mut t, &vars, &edges_from_lists(neighbors), iters, tau);
    Ok(out.into_iter().map(|v| t.value(v).clone()).collect())
}

fn cosine_rows(rows: &Array2<f64>) -> Array2<f64> {
    let mut m = rows.clone();
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt() + NORM_EPS;
        r /= n;
    }
    m
}

/// Indices of the `k` largest entries of `sims` (excluding `skip`), ties to the lower index.
fn top_k(sims: ndarray::ArrayView1<f64>, k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).filter(|&j| Some(j) != skip).collect();
    idx.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Mutual k-nearest-neighbour lists under cosine similarity.
pub fn mutual_knn(rows: &Array2<f64>, k: usize) -> Vec<Vec<usize>> {
    let unit = cosine_rows(rows);
    let sims = unit.dot(&unit.t());
    let knn: Vec<Vec<usize>> = (0..rows.nrows()).map(|i| top_k(sims.row(i), k, Some(i))).collect();
    (0..rows.nrows())
        .map(|i| knn[i].iter().copied().filter(|&j| knn[j].binary_search(&i).is_ok()).collect())
        .collect()
}

/// For each query row, its `k` nearest reference rows under cosine similarity.
pub fn knn_against(queries: &Array2<f64>, reference: &Array2<f64>, k: usize) -> Vec<Vec<usize>> {
    let sims = cosine_rows(queries).dot(&cosine_rows(reference).t());
    (0..queries.nrows()).map(|i| top_k(sims.row(i), k, None)).collect()
}

/// Sum of `p ln(p / q)` over entries with `p > 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    Ok(p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b).ln()).sum())
}

/// `mean(-ln pA[y] - ln qd[y]) + lambda * mean KL(pA || qd)`.
pub fn loss_attack(p_a: &Array2<f64>, q_d: &Array2<f64>, labels: &[usize], lambda: f64) -> Result<f64> {
    if p_a.dim() != q_d.dim() || p_a.nrows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "p_A {:?}, q_d {:?}, {} labels",
            p_a.dim(),
            q_d.dim(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("no attack labels".into()));
    }
    let mut total = 0.0;
    for ((pa, qd), &y) in p_a.rows().into_iter().zip(q_d.rows()).zip(labels) {
        if y >= pa.len() {
            return Err(Error::LabelOutOfRange { label: y, classes: pa.len() });
        }
        let kl = kl_divergence(pa.as_slice().expect("row"), qd.as_slice().expect("row"))?;
        total += -pa[y].ln() - qd[y].ln() + lambda * kl;
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layout {
    gate: [usize; 4],
    /// Per depth layer: weight, bias.
    layers: Vec<[usize; 2]>,
    proj: [usize; 2],
    head: [usize; 4],
    channel_head: [usize; 2],
}

/// Trained disentangled head together with the rows it routes against.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangleHead {
    pub cfg: DisentangleConfig,
    pub params: Params,
    pub num_classes: usize,
    train_rows: Array2<f64>,
    train_prompts: Array2<f64>,
    train_neighbors: Vec<Vec<usize>>,
    layout: Layout,
}

/// Tape handles of a disentangled forward pass.
struct HeadVars {
    routed: Var,
    attack_logits: Var,
    channel_logits: Var,
}

impl DisentangleHead {
    fn init(cfg: &DisentangleConfig, input_dim: usize, prompt_dim: usize, num_classes: usize) -> (Params, Layout) {
        let mut rng = rng_from(cfg.seed, "disentangle-init");
        let mut p = Params::new();
        let (d, gh, hh) = (cfg.dim, cfg.prompt_hidden, cfg.head_hidden);
        let gate = [
            p.push("gate_w1", glorot(prompt_dim, gh, &mut rng)),
            p.push("gate_b1", Array2::zeros((1, gh))),
            p.push("gate_w2", glorot(gh, input_dim, &mut rng)),
            p.push("gate_b2", Array2::ones((1, input_dim))),
        ];
        let mut layers = Vec::new();
        let mut d_in = input_dim;
        for l in 0..cfg.depth {
            layers.push([p.push(format!("w_{l}"), glorot(d_in, d, &mut rng)), p.push(format!("b_{l}"), Array2::zeros((1, d)))]);
            d_in = d;
        }
        let proj = [p.push("proj_w", glorot(input_dim, d, &mut rng)), p.push("proj_b", Array2::zeros((1, d)))];
        let head = [
            p.push("head_w1", glorot(d, hh, &mut rng)),
            p.push("head_b1", Array2::zeros((1, hh))),
            p.push("head_w2", glorot(hh, num_classes, &mut rng)),
            p.push("head_b2", Array2::zeros((1, num_classes))),
        ];
        let channel_head =
            [p.push("channel_w", glorot(d, num_classes, &mut rng)), p.push("channel_b", Array2::zeros((1, num_classes)))];
        (p, Layout { gate, layers, proj, head, channel_head })
    }

    fn forward(&self, t: &mut Tape, pv: &[Var], rows: &Array2<f64>, prompts: &Array2<f64>, edges: &Rc<Edges>) -> HeadVars {
        let cfg = &self.cfg;
        let l = &self.layout;
        let h = t.constant(rows.clone());
        let p = t.constant(prompts.clone());
        let g = t.matmul(p, pv[l.gate[0]]);
        let g = t.add(g, pv[l.gate[1]]);
        let g = t.relu(g);
        let g = t.matmul(g, pv[l.gate[2]]);
        let g = t.add(g, pv[l.gate[3]]);
        let mut u = t.mul(g, h);
        let dk = cfg.dim / cfg.channels;
        for &[w, b] in &l.layers {
            let z = t.matmul(u, pv[w]);
            let z = t.add(z, pv[b]);
            let z = cfg.activation.apply(t, z);
            let slots: Vec<Var> = (0..cfg.channels)
                .map(|k| {
                    let s = t.slice_cols(z, k * dk, (k + 1) * dk);
                    t.row_normalize(s, NORM_EPS)
                })
                .collect();
            let routed = route_tape(t, &slots, edges, cfg.routing_iters, cfg.tau);
            u = t.concat_cols(&routed);
        }
        let routed = t.row_normalize(u, NORM_EPS);
        let attack_logits = self.head_logits(t, pv, routed, h);
        let channel_logits = t.matmul(routed, pv[l.channel_head[0]]);
        let channel_logits = t.add(channel_logits, pv[l.channel_head[1]]);
        HeadVars { routed, attack_logits, channel_logits }
    }

    fn head_logits(&self, t: &mut Tape, pv: &[Var], routed: Var, h: Var) -> Var {
        let l = &self.layout;
        let hb = t.matmul(h, pv[l.proj[0]]);
        let hb = t.add(hb, pv[l.proj[1]]);
        let x = t.mul(routed, hb);
        let x = t.matmul(x, pv[l.head[0]]);
        let x = t.add(x, pv[l.head[1]]);
        let x = t.relu(x);
        let x = t.matmul(x, pv[l.head[2]]);
        t.add(x, pv[l.head[3]])
    }

    /// Attack and channel posteriors for one routed vector and its features.
    pub fn attack_forward(&self, routed: &Array1<f64>, h: &Array1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        if routed.len() != self.cfg.dim || h.len() != self.train_rows.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "routed width {} (expected {}), feature width {} (expected {})",
                routed.len(),
                self.cfg.dim,
                h.len(),
                self.train_rows.ncols()
            )));
        }
        let mut t = Tape::new();
        let pv = self.params.register_frozen(&mut t);
        let r = t.constant(routed.clone().insert_axis(Axis(0)));
        let hv = t.constant(h.clone().insert_axis(Axis(0)));
        let logits = self.head_logits(&mut t, &pv, r, hv);
        let pa = t.softmax(logits);
        let cl = t.matmul(r, pv[self.layout.channel_head[0]]);
        let cl = t.add(cl, pv[self.layout.channel_head[1]]);
        let qd = t.softmax(cl);
        Ok((t.value(pa).row(0).to_owned(), t.value(qd).row(0).to_owned()))
    }

    /// `L_2` and its parameter gradients on the training rows.
    pub fn loss_and_grads(&self, labels: &[usize]) -> (f64, Vec<Array2<f64>>) {
        let edges = edges_from_lists(&self.train_neighbors);
        let mut t = Tape::new();
        let pv = self.params.register(&mut t);
        let out = self.forward(&mut t, &pv, &self.train_rows, &self.train_prompts, &edges);
        let loss = attack_loss_tape(&mut t, out.attack_logits, out.channel_logits, labels, self.cfg.lambda);
        let value = t.item(loss);
        let mut grads = t.backward(loss);
        (value, self.params.collect_grads(&pv, &mut grads))
    }

    /// Evaluate `(attack posteriors, channel posteriors, routed vectors)` for
    /// query rows, each routed against its nearest training rows.
    pub fn evaluate(&self, rows: &Array2<f64>, prompts: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        if rows.ncols() != self.train_rows.ncols() || prompts.ncols() != self.train_prompts.ncols() {
            return Err(Error::DimensionMismatch("query rows do not match the training layout".into()));
        }
        if rows.nrows() != prompts.nrows() {
            return Err(Error::DimensionMismatch(format!("{} rows for {} prompts", rows.nrows(), prompts.nrows())));
        }
        let n_train = self.train_rows.nrows();
        let mut neighbors = self.train_neighbors.clone();
        neighbors.extend(knn_against(rows, &self.train_rows, self.cfg.knn));
        let all_rows = concatenate(Axis(0), &[self.train_rows.view(), rows.view()]).expect("same width");
        let all_prompts = concatenate(Axis(0), &[self.train_prompts.view(), prompts.view()]).expect("same width");
        let edges = edges_from_lists(&neighbors);
        let mut t = Tape::new();
        let pv = self.params.register_frozen(&mut t);
        let out = self.forward(&mut t, &pv, &all_rows, &all_prompts, &edges);
        let query: Rc<Vec<usize>> = Rc::new((n_train..n_train + rows.nrows()).collect());
        let pa = t.gather_rows(out.attack_logits, query.clone());
        let pa = t.softmax(pa);
        let qd = t.gather_rows(out.channel_logits, query.clone());
        let qd = t.softmax(qd);
        let routed = t.gather_rows(out.routed, query);
        Ok((t.value(pa).clone(), t.value(qd).clone(), t.value(routed).clone()))
    }

    /// Training-row posteriors under the training routing graph.
    pub fn train_posteriors(&self) -> Array2<f64> {
        let edges = edges_from_lists(&self.train_neighbors);
        let mut t = Tape::new();
        let pv = self.params.register_frozen(&mut t);
        let out = self.forward(&mut t, &pv, &self.train_rows, &self.train_prompts, &edges);
        let pa = t.softmax(out.attack_logits);
        t.value(pa).clone()
    }
}

fn attack_loss_tape(t: &mut Tape, attack_logits: Var, channel_logits: Var, labels: &[usize], lambda: f64) -> Var {
    let labels = Rc::new(labels.to_vec());
    let ce_a = t.cross_entropy(attack_logits, labels.clone());
    let ce_q = t.cross_entropy(channel_logits, labels);
    let la = t.log_softmax(attack_logits);
    let lq = t.log_softmax(channel_logits);
    let pa = t.exp(la);
    let diff = t.sub(la, lq);
    let kl = t.mul(pa, diff);
    let kl = t.row_sum(kl);
    let kl = t.mean(kl);
    let kl = t.scale(kl, lambda);
    let ce = t.add(ce_a, ce_q);
    t.add(ce, kl)
}

/// Two-layer perceptron over the raw attack rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub cfg: MlpConfig,
    pub params: Params,
    pub num_classes: usize,
}

impl MlpHead {
    fn logits(&self, t: &mut Tape, pv: &[Var], rows: &Array2<f64>) -> Var {
        let x = t.constant(rows.clone());
        let x = t.matmul(x, pv[0]);
        let x = t.add(x, pv[1]);
        let x = t.relu(x);
        let x = t.matmul(x, pv[2]);
        t.add(x, pv[3])
    }

    pub fn posteriors(&self, rows: &Array2<f64>) -> Result<Array2<f64>> {
        if rows.ncols() != self.params.get(0).nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} attack features for a head expecting {}",
                rows.ncols(),
                self.params.get(0).nrows()
            )));
        }
        let mut t = Tape::new();
        let pv = self.params.register_frozen(&mut t);
        let l = self.logits(&mut t, &pv, rows);
        let p = t.softmax(l);
        Ok(t.value(p).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackHead {
    Mlp(MlpHead),
    Disentangle(DisentangleHead),
}

/// Trained attack model and its training loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackModel {
    pub head: AttackHead,
    /// Loss before each update, then after the last one.
    pub loss_curve: Vec<f64>,
}

impl AttackModel {
    pub fn num_classes(&self) -> usize {
        match &self.head {
            AttackHead::Mlp(m) => m.num_classes,
            AttackHead::Disentangle(d) => d.num_classes,
        }
    }

    pub fn params(&self) -> &Params {
        match &self.head {
            AttackHead::Mlp(m) => &m.params,
            AttackHead::Disentangle(d) => &d.params,
        }
    }

    /// Attack posteriors for dataset rows `idx`.
    pub fn predict_proba(&self, ds: &AttackDataset, idx: &[usize]) -> Result<Array2<f64>> {
        let rows = ds.rows.select(Axis(0), idx);
        match &self.head {
            AttackHead::Mlp(m) => m.posteriors(&rows),
            AttackHead::Disentangle(d) => {
                let prompts = prompt_rows(ds, idx);
                Ok(d.evaluate(&rows, &prompts)?.0)
            }
        }
    }

    /// Routed representations of dataset rows `idx` (disentangled head only).
    pub fn routed(&self, ds: &AttackDataset, idx: &[usize]) -> Option<Result<Array2<f64>>> {
        match &self.head {
            AttackHead::Mlp(_) => None,
            AttackHead::Disentangle(d) => {
                let rows = ds.rows.select(Axis(0), idx);
                Some(d.evaluate(&rows, &prompt_rows(ds, idx)).map(|r| r.2))
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        persist::write_params(&dir.join("attack_head.bin"), self.params())?;
        let curve: String = self.loss_curve.iter().enumerate().map(|(i, l)| format!("{i},{l:?}\n")).collect();
        std::fs::write(dir.join("attack_loss.csv"), format!("epoch,loss\n{curve}"))?;
        Ok(())
    }
}

/// Prompt rows of `ds`, or a single all-ones column when it has none.
fn prompt_rows(ds: &AttackDataset, idx: &[usize]) -> Array2<f64> {
    match &ds.prompts {
        Some(p) => p.select(Axis(0), idx),
        None => Array2::ones((idx.len(), 1)),
    }
}

fn train_split(ds: &AttackDataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let idx = ds.train_indices();
    if idx.is_empty() {
        return Err(Error::EmptyInput("attack dataset has no training rows".into()));
    }
    let labels = idx.iter().map(|&i| ds.labels[i]).collect();
    Ok((idx, labels))
}

/// Fit the disentangled head on the dataset's training rows.
pub fn train_attack(ds: &AttackDataset, cfg: &DisentangleConfig) -> Result<AttackModel> {
    cfg.validate()?;
    let (idx, labels) = train_split(ds)?;
    let rows = ds.rows.select(Axis(0), &idx);
    let prompts = prompt_rows(ds, &idx);
    let (params, layout) = DisentangleHead::init(cfg, rows.ncols(), prompts.ncols(), ds.num_classes);
    let mut head = DisentangleHead {
        cfg: cfg.clone(),
        params,
        num_classes: ds.num_classes,
        train_neighbors: mutual_knn(&rows, cfg.knn),
        train_rows: rows,
        train_prompts: prompts,
        layout,
    };
    let mut opt = Adam::new(&head.params, cfg.learning_rate, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (loss, grads) = head.loss_and_grads(&labels);
        ensure_finite(loss, epoch, "attack")?;
        curve.push(loss);
        if epoch == cfg.epochs {
            break;
        }
        opt.step(&mut head.params, &grads);
    }
    Ok(AttackModel { head: AttackHead::Disentangle(head), loss_curve: curve })
}

/// Fit a plain MLP head on the dataset's training rows.
pub fn train_mlp_attack(ds: &AttackDataset, cfg: &MlpConfig) -> Result<AttackModel> {
    let (idx, labels) = train_split(ds)?;
    let rows = ds.rows.select(Axis(0), &idx);
    let mut rng = rng_from(cfg.seed, "mlp-attack-init");
    let mut params = Params::new();
    params.push("w1", glorot(rows.ncols(), cfg.hidden, &mut rng));
    params.push("b1", Array2::zeros((1, cfg.hidden)));
    params.push("w2", glorot(cfg.hidden, ds.num_classes, &mut rng));
    params.push("b2", Array2::zeros((1, ds.num_classes)));
    let mut head = MlpHead { cfg: cfg.clone(), params, num_classes: ds.num_classes };
    let labels = Rc::new(labels);
    let mut opt = Adam::new(&head.params, cfg.learning_rate, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let mut t = Tape::new();
        let pv = head.params.register(&mut t);
        let logits = head.logits(&mut t, &pv, &rows);
        let loss = t.cross_entropy(logits, labels.clone());
        ensure_finite(t.item(loss), epoch, "attack")?;
        curve.push(t.item(loss));
        if epoch == cfg.epochs {
            break;
        }
        let mut g = t.backward(loss);
        let grads = head.params.collect_grads(&pv, &mut g);
        opt.step(&mut head.params, &grads);
    }
    Ok(AttackModel { head: AttackHead::Mlp(head), loss_curve: curve })
}
