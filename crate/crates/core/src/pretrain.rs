//! Information-bottleneck constrained contrastive pre-training of the prompt
//! encoder.
//!
//! The encoder projects node features, then runs `layers` rounds of
//! stochastic-structure message passing. In each round every directed edge
//! (self-loops included) gets an attention logit `phi` computed from the
//! concatenated endpoint embeddings; the structure weight is drawn as
//! `phi + sigma_fixed * eps` (membership channel) and the aggregated node state
//! is a diagonal Gaussian `mu + sigma * eps` (attribute channel). Deterministic
//! mode replaces both draws by their means.
//!
//! Training minimises `alpha * L_CL + (1 - alpha) * L_IB` where `L_CL` is the
//! binary cross-entropy of a bilinear local/global discriminator and
//! `L_IB = CE + beta_A * L_A + beta_M * L_M` with closed-form Gaussian KL terms
//! against standard-normal priors, summed over every layer.

use std::path::Path;
use std::rc::Rc;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Csr, Edges, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{self, Adjacency, Graph};
use crate::nn::{derive_seed, ensure_finite, glorot, rng_from, Activation, Adam, Params};
use crate::persist;

/// Lower/upper clamp applied to discriminator probabilities before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub beta_a: f64,
    pub beta_m: f64,
    /// Weight of the contrastive term in `L_1`.
    pub alpha: f64,
    /// Jaccard threshold for the local view.
    pub threshold_t: f64,
    pub bernoulli_q: f64,
    /// Standard deviation of the sampled structure weights.
    pub sigma_fixed: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Radius of the ReadOut neighbourhood used for prompt features.
    pub readout_hops: usize,
    pub bilinear_activation: Activation,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_dim: 256,
            beta_a: 1e-4,
            beta_m: 1e-4,
            alpha: 0.5,
            threshold_t: 0.1,
            bernoulli_q: 0.05,
            sigma_fixed: 0.1,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            epochs: 200,
            readout_hops: 1,
            bilinear_activation: Activation::Sigmoid,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha={} not in [0,1]", self.alpha)));
        }
        if self.beta_a < 0.0 || self.beta_m < 0.0 {
            return Err(Error::InvalidParameter("beta_A and beta_M must be nonnegative".into()));
        }
        if self.layers == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidParameter("layers and hidden_dim must be positive".into()));
        }
        if self.sigma_fixed <= 0.0 {
            return Err(Error::InvalidParameter("sigma_fixed must be positive".into()));
        }
        Ok(())
    }

    /// Short digest of the full configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        persist::digest_bytes(&json)
    }
}

/// Whether Gaussian draws are sampled or replaced by their means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Stochastic,
    Deterministic,
}

/// Per-layer encoder state.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// `z[0]` is the projected input; `z[l]` the output of layer `l`.
    pub z: Vec<Array2<f64>>,
    /// Attribute-channel Gaussian means, one per encoded layer.
    pub mu: Vec<Array2<f64>>,
    /// Attribute-channel standard deviations, one per encoded layer.
    pub sigma: Vec<Array2<f64>>,
    /// Membership-channel attention logits (`E x 1`), one per encoded layer.
    pub phi: Vec<Array2<f64>>,
    /// Sampled structure weights (`E x 1`), one per encoded layer.
    pub weights: Vec<Array2<f64>>,
    pub sigma_fixed: f64,
}

/// Structure and features of one encoder input view.
#[derive(Debug, Clone)]
pub struct EncoderView {
    features: Rc<Csr>,
    edges: Rc<Edges>,
    dst: Rc<Vec<usize>>,
    src: Rc<Vec<usize>>,
    /// `1 / |N(v) + self|` for the destination of each edge.
    norm: Array2<f64>,
}

impl EncoderView {
    /// Self-loops are added to every node.
    pub fn new(features: &Array2<f64>, adj: &Adjacency) -> Self {
        let n = adj.node_count();
        let (mut dst, mut src) = (Vec::new(), Vec::new());
        for v in 0..n {
            dst.push(v);
            src.push(v);
            for &u in &adj.neighbors[v] {
                dst.push(v);
                src.push(u);
            }
        }
        let norm = Array2::from_shape_fn((dst.len(), 1), |(e, _)| 1.0 / (adj.degree(dst[e]) + 1) as f64);
        Self {
            features: Rc::new(Csr::from_dense(features)),
            edges: Rc::new(Edges::new(dst.clone(), src.clone(), n)),
            dst: Rc::new(dst),
            src: Rc::new(src),
            norm,
        }
    }

    pub fn from_graph(g: &Graph) -> Self {
        Self::new(g.features(), &g.adjacency())
    }

    pub fn node_count(&self) -> usize {
        self.edges.n_dst
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &Edges {
        &self.edges
    }
}

/// The four views contrasted during pre-training.
#[derive(Debug, Clone)]
pub struct PretrainViews {
    pub global: EncoderView,
    pub shuffled: EncoderView,
    pub local1: EncoderView,
    pub local2: EncoderView,
}

impl PretrainViews {
    pub fn build(g: &Graph, cfg: &PretrainConfig) -> Result<Self> {
        let local = graph::build_local_subgraph(g, cfg.threshold_t)?;
        let lo1 = graph::bernoulli_augment(&local, cfg.bernoulli_q, derive_seed(cfg.seed, "local-view-1"))?;
        let lo2 = graph::bernoulli_augment(&local, cfg.bernoulli_q, derive_seed(cfg.seed, "local-view-2"))?;
        let shuffled = graph::shuffle_features(g, derive_seed(cfg.seed, "negative-view"));
        Ok(Self {
            global: EncoderView::from_graph(g),
            shuffled: EncoderView::from_graph(&shuffled),
            local1: EncoderView::from_graph(&lo1),
            local2: EncoderView::from_graph(&lo2),
        })
    }
}

/// Parameter slot layout of [`Encoder`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Layout {
    w_in: usize,
    b_in: usize,
    /// Per layer: transform, attention (dst half), attention (src half), sigma weight, sigma bias.
    layers: Vec<[usize; 5]>,
    prompt: usize,
    w_cls: usize,
    b_cls: usize,
    w_bil: usize,
    b_bil: usize,
}

/// Pre-trained prompt encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: PretrainConfig,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub params: Params,
    layout: Layout,
}

/// Tape handles of one view's forward pass.
struct ViewVars {
    z: Vec<Var>,
    mu: Vec<Var>,
    sigma: Vec<Var>,
    phi: Vec<Var>,
    weights: Vec<Var>,
}

/// Value of every pre-training loss term for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub classification: f64,
    pub attribute_kl: f64,
    pub membership_kl: f64,
    pub ib: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Which objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Contrastive,
    InformationBottleneck,
    Total,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

impl Encoder {
    pub fn new(feature_dim: usize, num_classes: usize, cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let mut rng = rng_from(cfg.seed, "encoder-init");
        let mut p = Params::new();
        let w_in = p.push("w_in", glorot(feature_dim, h, &mut rng));
        let b_in = p.push("b_in", Array2::zeros((1, h)));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            layers.push([
                p.push(format!("w_{l}"), glorot(h, h, &mut rng)),
                p.push(format!("att_dst_{l}"), glorot(h, 1, &mut rng)),
                p.push(format!("att_src_{l}"), glorot(h, 1, &mut rng)),
                p.push(format!("w_sigma_{l}"), glorot(h, h, &mut rng) * 0.1),
                p.push(format!("b_sigma_{l}"), Array2::from_elem((1, h), -2.0)),
            ]);
        }
        let prompt = p.push("prompt", Array2::ones((1, h)));
        let w_cls = p.push("w_cls", glorot(h, num_classes, &mut rng));
        let b_cls = p.push("b_cls", Array2::zeros((1, num_classes)));
        let w_bil = p.push("w_bilinear", glorot(h, h, &mut rng));
        let b_bil = p.push("b_bilinear", Array2::zeros((1, 1)));
        Ok(Self {
            cfg: cfg.clone(),
            feature_dim,
            num_classes,
            params: p,
            layout: Layout { w_in, b_in, layers, prompt, w_cls, b_cls, w_bil, b_bil },
        })
    }

    /// Learned prompt vector `p` used by the ReadOut.
    pub fn prompt_vector(&self) -> Array1<f64> {
        self.params.get(self.layout.prompt).row(0).to_owned()
    }

    fn project_input(&self, t: &mut Tape, pv: &[Var], view: &EncoderView) -> Var {
        let x = t.spmm(view.features.clone(), pv[self.layout.w_in]);
        t.add(x, pv[self.layout.b_in])
    }

    /// One message-passing layer on the tape.
    fn layer(
        &self,
        t: &mut Tape,
        pv: &[Var],
        l: usize,
        input: Var,
        view: &EncoderView,
        noise: &mut Option<ChaCha8Rng>,
    ) -> (Var, Var, Var, Var, Var) {
        let [w, att_dst, att_src, w_sig, b_sig] = self.layout.layers[l - 1];
        let rect = t.relu(input);
        let zh = t.matmul(rect, pv[w]);
        let s_dst = t.matmul(zh, pv[att_dst]);
        let s_src = t.matmul(zh, pv[att_src]);
        let g_dst = t.gather_rows(s_dst, view.dst.clone());
        let g_src = t.gather_rows(s_src, view.src.clone());
        let logit = t.add(g_dst, g_src);
        let phi = t.sigmoid(logit);
        let weights = match noise {
            Some(rng) => {
                let eps = normal_matrix(rng, view.edge_count(), 1) * self.cfg.sigma_fixed;
                let eps = t.constant(eps);
                t.add(phi, eps)
            }
            None => phi,
        };
        let norm = t.constant(view.norm.clone());
        let scaled = t.mul(weights, norm);
        let mu = t.edge_aggregate(scaled, zh, view.edges.clone());
        let pre_sigma = t.matmul(mu, pv[w_sig]);
        let pre_sigma = t.add(pre_sigma, pv[b_sig]);
        let sigma = t.softplus(pre_sigma);
        let sigma = t.affine(sigma, 1.0, 1e-6);
        let z = match noise {
            Some(rng) => {
                let (n, h) = t.shape(mu);
                let eps = t.constant(normal_matrix(rng, n, h));
                let spread = t.mul(sigma, eps);
                t.add(mu, spread)
            }
            None => mu,
        };
        (z, mu, sigma, phi, weights)
    }

    fn forward(&self, t: &mut Tape, pv: &[Var], view: &EncoderView, noise: &mut Option<ChaCha8Rng>) -> ViewVars {
        let mut out = ViewVars { z: Vec::new(), mu: Vec::new(), sigma: Vec::new(), phi: Vec::new(), weights: Vec::new() };
        let mut z = self.project_input(t, pv, view);
        out.z.push(z);
        for l in 1..=self.cfg.layers {
            let (zl, mu, sigma, phi, w) = self.layer(t, pv, l, z, view, noise);
            out.z.push(zl);
            out.mu.push(mu);
            out.sigma.push(sigma);
            out.phi.push(phi);
            out.weights.push(w);
            z = zl;
        }
        out
    }

    /// Fresh state holding only the projected input features.
    pub fn initial_state(&self, view: &EncoderView) -> LatentState {
        let mut t = Tape::new();
        let pv = self.params.register_frozen(&mut t);
        let z0 = self.project_input(&mut t, &pv, view);
        LatentState {
            z: vec![t.value(z0).clone()],
            mu: Vec::new(),
            sigma: Vec::new(),
            phi: Vec::new(),
            weights: Vec::new(),
            sigma_fixed: self.cfg.sigma_fixed,
        }
    }

    /// Fill layer `l` of `state` from layer `l - 1`.
    pub fn encode_layer(
        &self,
        state: &LatentState,
        view: &EncoderView,
        l: usize,
        mode: Mode,
        seed: u64,
    ) -> Result<LatentState> {
        if l == 0 || l > self.cfg.layers {
            return Err(Error::InvalidParameter(format!("layer {l} not in [1, {}]", self.cfg.layers)));
        }
        if state.z.len() < l {
            return Err(Error::InvalidParameter(format!("layer {} has not been encoded", l - 1)));
        }
        let mut t = Tape::new();
        let pv = self.params.register_frozen(&mut t);
        let input = t.constant(state.z[l - 1].clone());
        let mut noise = match mode {
            Mode::Stochastic => Some(rng_from(seed, "encode-layer")),
            Mode::Deterministic => None,
        };
        let (z, mu, sigma, phi, w) = self.layer(&mut t, &pv, l, input, view, &mut noise);
        let mut next = state.clone();
        next.z.truncate(l);
        next.mu.truncate(l - 1);
        next.sigma.truncate(l - 1);
        next.phi.truncate(l - 1);
        next.weights.truncate(l - 1);
        next.z.push(t.value(z).clone());
        next.mu.push(t.value(mu).clone());
        next.sigma.push(t.value(sigma).clone());
        next.phi.push(t.value(phi).clone());
        next.weights.push(t.value(w).clone());
        Ok(next)
    }

    /// Every layer in deterministic mode.
    pub fn encode(&self, view: &EncoderView) -> LatentState {
        let mut state = self.initial_state(view);
        for l in 1..=self.cfg.layers {
            state = self.encode_layer(&state, view, l, Mode::Deterministic, 0).expect("layer index in range");
        }
        state
    }

    /// Final-layer embeddings in deterministic mode.
    pub fn embed(&self, g: &Graph) -> Array2<f64> {
        let mut state = self.encode(&EncoderView::from_graph(g));
        state.z.pop().expect("at least one layer")
    }

    /// Classifier posteriors for final-layer embeddings.
    pub fn classify(&self, z_final: &Array2<f64>) -> Array2<f64> {
        let mut t = Tape::new();
        let pv = self.params.register_frozen(&mut t);
        let z = t.constant(z_final.clone());
        let logits = self.logits(&mut t, &pv, z);
        let probs = t.softmax(logits);
        t.value(probs).clone()
    }

    fn logits(&self, t: &mut Tape, pv: &[Var], z: Var) -> Var {
        let gated = t.mul(z, pv[self.layout.prompt]);
        let logits = t.matmul(gated, pv[self.layout.w_cls]);
        t.add(logits, pv[self.layout.b_cls])
    }

    fn bilinear(&self, t: &mut Tape, pv: &[Var], z_lo: Var, z_gl: Var) -> Var {
        let a = self.cfg.bilinear_activation.apply(t, z_lo);
        let aw = t.matmul(a, pv[self.layout.w_bil]);
        let s = t.row_dot(aw, z_gl);
        let s = t.add(s, pv[self.layout.b_bil]);
        t.sigmoid(s)
    }

    /// Build every loss term on `t`, returning the requested objective.
    fn build_loss(
        &self,
        t: &mut Tape,
        pv: &[Var],
        views: &PretrainViews,
        labels: &Rc<Vec<usize>>,
        label_nodes: &Rc<Vec<usize>>,
        seed: u64,
        term: LossTerm,
    ) -> Result<(Var, LossParts)> {
        let mut noise = Some(rng_from(seed, "pretrain-noise"));
        let gl = self.forward(t, pv, &views.global, &mut noise);
        let sh = self.forward(t, pv, &views.shuffled, &mut noise);
        let lo1 = self.forward(t, pv, &views.local1, &mut noise);
        let lo2 = self.forward(t, pv, &views.local2, &mut noise);
        let last = self.cfg.layers;

        let pos = self.bilinear(t, pv, lo1.z[last], gl.z[last]);
        let neg = self.bilinear(t, pv, lo2.z[last], sh.z[last]);
        let pos = t.clamp(pos, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let neg = t.clamp(neg, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let log_pos = t.ln(pos);
        let one_minus = t.affine(neg, -1.0, 1.0);
        let log_neg = t.ln(one_minus);
        let both = t.add(log_pos, log_neg);
        let mean = t.mean(both);
        let l_cl = t.scale(mean, -1.0);

        let selected = t.gather_rows(gl.z[last], label_nodes.clone());
        let logits = self.logits(t, pv, selected);
        let cls = t.cross_entropy(logits, labels.clone());
        let mut l_a = t.scalar(0.0);
        let mut l_m = t.scalar(0.0);
        for l in 0..last {
            let ka = gaussian_kl_tape(t, gl.mu[l], gl.sigma[l]);
            l_a = t.add(l_a, ka);
            let km = fixed_sigma_kl_tape(t, gl.phi[l], self.cfg.sigma_fixed);
            l_m = t.add(l_m, km);
        }
        let wa = t.scale(l_a, self.cfg.beta_a);
        let wm = t.scale(l_m, self.cfg.beta_m);
        let l_ib = t.add(cls, wa);
        let l_ib = t.add(l_ib, wm);
        let a = t.scale(l_cl, self.cfg.alpha);
        let b = t.scale(l_ib, 1.0 - self.cfg.alpha);
        let total = t.add(a, b);

        let parts = LossParts {
            classification: t.item(cls),
            attribute_kl: t.item(l_a),
            membership_kl: t.item(l_m),
            ib: t.item(l_ib),
            contrastive: t.item(l_cl),
            total: t.item(total),
        };
        let out = match term {
            LossTerm::Contrastive => l_cl,
            LossTerm::InformationBottleneck => l_ib,
            LossTerm::Total => total,
        };
        Ok((out, parts))
    }

    /// Loss terms and the gradient of `term` with respect to every parameter.
    /// Noise draws are fixed by `seed`, so the objective is deterministic.
    pub fn loss_and_grads(
        &self,
        views: &PretrainViews,
        labels: &[usize],
        label_nodes: &[usize],
        seed: u64,
        term: LossTerm,
    ) -> Result<(LossParts, Vec<Array2<f64>>)> {
        if label_nodes.is_empty() {
            return Err(Error::EmptyInput("no labelled nodes for the classification term".into()));
        }
        let n = views.global.node_count();
        let mut picked = Vec::with_capacity(label_nodes.len());
        for &v in label_nodes {
            if v >= n {
                return Err(Error::NodeOutOfRange { index: v, count: n });
            }
            let y = labels[v];
            if y >= self.num_classes {
                return Err(Error::LabelOutOfRange { label: y, classes: self.num_classes });
            }
            picked.push(y);
        }
        let mut t = Tape::new();
        let pv = self.params.register(&mut t);
        let (loss, parts) =
            self.build_loss(&mut t, &pv, views, &Rc::new(picked), &Rc::new(label_nodes.to_vec()), seed, term)?;
        let mut grads = t.backward(loss);
        Ok((parts, self.params.collect_grads(&pv, &mut grads)))
    }

    /// Per-node prompt features: mean ReadOut of `p * h` over each node's
    /// `readout_hops` neighbourhood on `g`.
    pub fn prompt_features(&self, g: &Graph) -> PromptFeature {
        let h = self.embed(g);
        let p = self.prompt_vector();
        let adj = g.adjacency();
        let gated = &h * &p.view().insert_axis(ndarray::Axis(0));
        let mut triplets = Vec::new();
        for v in 0..g.node_count() {
            let nodes = graph::khop_nodes(&adj, v, self.cfg.readout_hops);
            let w = 1.0 / nodes.len() as f64;
            triplets.extend(nodes.into_iter().map(|u| (v, u, w)));
        }
        let readout = Csr::from_triplets(g.node_count(), g.node_count(), triplets);
        PromptFeature {
            matrix: readout.matmul(&gated),
            provenance: format!("cfg:{}/seed:{}", self.cfg.digest(), self.cfg.seed),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        persist::write_params(&dir.join("encoder.bin"), &self.params)?;
        let meta = EncoderMeta { feature_dim: self.feature_dim, num_classes: self.num_classes, config: self.cfg.clone() };
        persist::write_toml(&dir.join("encoder.toml"), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: EncoderMeta = persist::read_toml(&dir.join("encoder.toml"))?;
        let mut enc = Encoder::new(meta.feature_dim, meta.num_classes, &meta.config)?;
        let params = persist::read_params(&dir.join("encoder.bin"))?;
        if params.names() != enc.params.names() {
            return Err(Error::Format("encoder weight file does not match its metadata".into()));
        }
        enc.params = params;
        Ok(enc)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EncoderMeta {
    feature_dim: usize,
    num_classes: usize,
    config: PretrainConfig,
}

/// `0.5 * sum(sigma^2 + mu^2 - 1 - ln sigma^2)` on the tape.
fn gaussian_kl_tape(t: &mut Tape, mu: Var, sigma: Var) -> Var {
    let s2 = t.square(sigma);
    let m2 = t.square(mu);
    let ls = t.ln(sigma);
    let ls2 = t.scale(ls, 2.0);
    let a = t.add(s2, m2);
    let b = t.sub(a, ls2);
    let b = t.affine(b, 0.5, -0.5);
    t.sum(b)
}

/// KL of `N(phi, s^2)` against `N(0, 1)` summed over entries, `s` fixed.
fn fixed_sigma_kl_tape(t: &mut Tape, phi: Var, s: f64) -> Var {
    let c = 0.5 * (s * s - 1.0 - (s * s).ln());
    let p2 = t.square(phi);
    let k = t.affine(p2, 0.5, c);
    t.sum(k)
}

/// Closed-form KL of a diagonal Gaussian against the standard normal, summed over entries.
pub fn attribute_kl(mu: &Array2<f64>, sigma: &Array2<f64>) -> Result<f64> {
    if mu.dim() != sigma.dim() {
        return Err(Error::DimensionMismatch(format!("mu {:?} vs sigma {:?}", mu.dim(), sigma.dim())));
    }
    let mut total = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(Error::InvalidParameter(format!("nonpositive standard deviation {s}")));
        }
        total += 0.5 * (s * s + m * m - 1.0 - (s * s).ln());
    }
    Ok(total)
}

/// Closed-form KL of `N(phi_e, s^2)` against `N(0, 1)`, summed over edges.
pub fn membership_kl(phi: &Array2<f64>, sigma_fixed: f64) -> Result<f64> {
    if !(sigma_fixed > 0.0) {
        return Err(Error::InvalidParameter(format!("nonpositive sigma_fixed {sigma_fixed}")));
    }
    let s2 = sigma_fixed * sigma_fixed;
    Ok(phi.iter().map(|&p| 0.5 * (s2 + p * p - 1.0 - s2.ln())).sum())
}

/// `L_A` over every encoded layer of `state`.
pub fn loss_attribute_kl(state: &LatentState) -> Result<f64> {
    if state.mu.is_empty() {
        return Err(Error::EmptyInput("state has no attribute-channel parameters".into()));
    }
    state.mu.iter().zip(&state.sigma).map(|(m, s)| attribute_kl(m, s)).sum()
}

/// `L_M` over every encoded layer of `state`.
pub fn loss_membership_kl(state: &LatentState) -> Result<f64> {
    if state.phi.is_empty() {
        return Err(Error::EmptyInput("state has no structure logits".into()));
    }
    state.phi.iter().map(|p| membership_kl(p, state.sigma_fixed)).sum()
}

/// Mean cross-entropy of posterior rows against labels.
pub fn loss_classification(posteriors: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if posteriors.nrows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} posterior rows for {} labels",
            posteriors.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("no labels".into()));
    }
    let mut total = 0.0;
    for (row, &y) in posteriors.rows().into_iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::LabelOutOfRange { label: y, classes: row.len() });
        }
        total -= row[y].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / labels.len() as f64)
}

/// `cls + beta_A * lA + beta_M * lM`.
pub fn loss_ib(cls: f64, l_a: f64, l_m: f64, cfg: &PretrainConfig) -> f64 {
    cls + cfg.beta_a * l_a + cfg.beta_m * l_m
}

/// `logistic(act(z_lo)^T W z_gl + b)`.
pub fn bilinear_score(
    z_lo: &Array1<f64>,
    z_gl: &Array1<f64>,
    w: &Array2<f64>,
    b: f64,
    activation: Activation,
) -> Result<f64> {
    if w.dim() != (z_lo.len(), z_gl.len()) {
        return Err(Error::DimensionMismatch(format!(
            "bilinear weight {:?} for vectors of length {} and {}",
            w.dim(),
            z_lo.len(),
            z_gl.len()
        )));
    }
    let a = z_lo.mapv(|v| activation.eval(v));
    let s = a.dot(&w.dot(z_gl)) + b;
    Ok(1.0 / (1.0 + (-s).exp()))
}

/// `-(1/N) sum(ln P_i + ln(1 - P_hat_i))` after clamping.
pub fn loss_contrastive(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::EmptyInput("no contrastive scores".into()));
    }
    if pos.len() != neg.len() {
        return Err(Error::DimensionMismatch(format!("{} positive vs {} negative scores", pos.len(), neg.len())));
    }
    let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let total: f64 = pos.iter().zip(neg).map(|(&p, &q)| clamp(p).ln() + (1.0 - clamp(q)).ln()).sum();
    Ok(-total / pos.len() as f64)
}

/// `alpha * lCL + (1 - alpha) * lIB`.
pub fn loss_pretrain(l_cl: f64, l_ib: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha={alpha} not in [0,1]")));
    }
    Ok(alpha * l_cl + (1.0 - alpha) * l_ib)
}

/// Mean ReadOut of `p * h_v` over `nodes`.
pub fn extract_prompt(h: &Array2<f64>, p: &Array1<f64>, nodes: &[usize]) -> Result<Array1<f64>> {
    if p.len() != h.ncols() {
        return Err(Error::DimensionMismatch(format!("prompt of length {} for embeddings of width {}", p.len(), h.ncols())));
    }
    if nodes.is_empty() {
        return Err(Error::EmptyInput("ReadOut over an empty subgraph".into()));
    }
    let mut acc = Array1::zeros(h.ncols());
    for &v in nodes {
        if v >= h.nrows() {
            return Err(Error::NodeOutOfRange { index: v, count: h.nrows() });
        }
        acc += &(&h.row(v) * p);
    }
    Ok(acc / nodes.len() as f64)
}

/// Per-node prompt vectors, one row per node of the graph they were read out on.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptFeature {
    pub matrix: Array2<f64>,
    /// `cfg:<config digest>/seed:<seed>`.
    pub provenance: String,
}

impl PromptFeature {
    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Rows for `nodes`, in the given order.
    pub fn select(&self, nodes: &[usize]) -> PromptFeature {
        PromptFeature { matrix: self.matrix.select(ndarray::Axis(0), nodes), provenance: self.provenance.clone() }
    }

    pub fn all_ones(rows: usize, dim: usize) -> PromptFeature {
        PromptFeature { matrix: Array2::ones((rows, dim)), provenance: "ones".into() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut p = Params::new();
        p.push(self.provenance.clone(), self.matrix.clone());
        persist::write_params(path, &p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = persist::read_params(path)?;
        if p.len() != 1 {
            return Err(Error::Format(format!("{} is not a prompt feature file", path.display())));
        }
        Ok(PromptFeature { matrix: p.get(0).clone(), provenance: p.names()[0].clone() })
    }
}

/// Loss values recorded for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub parts: LossParts,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub encoder: Encoder,
    pub prompts: PromptFeature,
    /// Entry `i` holds the loss evaluated before update `i`; the final entry is after training.
    pub loss_curve: Vec<EpochLoss>,
}

impl PretrainOutput {
    /// Weights, metadata, prompt matrix and loss curve under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.encoder.save(dir)?;
        self.prompts.save(&dir.join("prompts.bin"))?;
        let mut csv = String::from("epoch,total,contrastive,ib,classification,attribute_kl,membership_kl\n");
        for e in &self.loss_curve {
            let p = e.parts;
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, p.total, p.contrastive, p.ib, p.classification, p.attribute_kl, p.membership_kl
            ));
        }
        std::fs::write(dir.join("loss_curve.csv"), csv)?;
        std::fs::write(
            dir.join("meta.txt"),
            format!(
                "format = 1\nconfig_digest = \"{}\"\nseed = {}\nprovenance = \"{}\"\n",
                self.encoder.cfg.digest(),
                self.encoder.cfg.seed,
                self.prompts.provenance
            ),
        )?;
        Ok(())
    }
}

/// Train the encoder on `g` and read out prompt features for every node.
/// `label_nodes` restricts the classification term (all nodes when `None`).
pub fn pretrain(g: &Graph, cfg: &PretrainConfig, label_nodes: Option<&[usize]>) -> Result<PretrainOutput> {
    let mut encoder = Encoder::new(g.feature_dim(), g.num_classes(), cfg)?;
    let views = PretrainViews::build(g, cfg)?;
    let all: Vec<usize>;
    let label_nodes = match label_nodes {
        Some(nodes) => nodes,
        None => {
            all = (0..g.node_count()).collect();
            &all
        }
    };
    let mut opt = Adam::new(&encoder.params, cfg.learning_rate, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let seed = derive_seed(cfg.seed, &format!("epoch-{epoch}"));
        let (parts, grads) = encoder.loss_and_grads(&views, g.labels(), label_nodes, seed, LossTerm::Total)?;
        ensure_finite(parts.total, epoch, "pre-training")?;
        curve.push(EpochLoss { epoch, parts });
        if epoch == cfg.epochs {
            break;
        }
        opt.step(&mut encoder.params, &grads);
        if !encoder.params.all_finite() {
            return Err(Error::Diverged { epoch, what: "non-finite encoder parameters".into() });
        }
    }
    let prompts = encoder.prompt_features(g);
    Ok(PretrainOutput { encoder, prompts, loss_curve: curve })
}
