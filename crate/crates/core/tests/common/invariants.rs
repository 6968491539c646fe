//! Normalisation and sign invariants over random parameterisations.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use proia::attack_data::{AttackDataset, AttackKind, Origin};
use proia::disentangle::{
    channel_map, kl_divergence, route, routing_step, train_attack, update_rep, AttackHead, ChannelParams,
    DisentangleConfig,
};
use proia::graph::Graph;
use proia::nn::Activation;
use proia::pretrain::{attribute_kl, membership_kl};
use proia::victim::{query_posteriors, train_victim, BackboneKind, BackboneSpec};

/// Largest deviations seen across a sweep.
#[derive(Debug, Default, Clone, Copy)]
pub struct Worst {
    /// `max |row sum - 1|` over every probability row.
    pub row_sum: f64,
    /// `max |norm - 1|` over every unit vector.
    pub unit_norm: f64,
    /// Smallest KL value observed.
    pub min_kl: f64,
    /// Smallest entry of any probability row.
    pub min_prob: f64,
}

impl Worst {
    fn new() -> Self {
        Self { row_sum: 0.0, unit_norm: 0.0, min_kl: f64::INFINITY, min_prob: f64::INFINITY }
    }

    fn rows(&mut self, m: &Array2<f64>) {
        for r in m.rows() {
            self.row_sum = self.row_sum.max((r.sum() - 1.0).abs());
            self.min_prob = self.min_prob.min(r.iter().copied().fold(f64::INFINITY, f64::min));
        }
    }

    fn probs(&mut self, v: &[f64]) {
        self.row_sum = self.row_sum.max((v.iter().sum::<f64>() - 1.0).abs());
        self.min_prob = self.min_prob.min(v.iter().copied().fold(f64::INFINITY, f64::min));
    }

    fn unit(&mut self, v: ndarray::ArrayView1<f64>) {
        self.unit_norm = self.unit_norm.max((v.dot(&v).sqrt() - 1.0).abs());
    }

    fn kl(&mut self, k: f64) {
        self.min_kl = self.min_kl.min(k);
    }

    pub fn holds(&self) -> bool {
        self.row_sum <= 1e-6 && self.unit_norm <= 1e-6 && self.min_kl >= -1e-9 && self.min_prob >= 0.0
    }
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

fn unit_vec(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    let v = normal_vec(rng, len, 1.0);
    let n = v.dot(&v).sqrt();
    v / n
}

fn distribution(rng: &mut ChaCha8Rng, len: usize, allow_zero: bool) -> Vec<f64> {
    let raw: Vec<f64> = (0..len)
        .map(|_| if allow_zero && rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() + 1e-3 })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        return vec![1.0 / len as f64; len];
    }
    raw.iter().map(|x| x / s).collect()
}

fn random_graph(rng: &mut ChaCha8Rng) -> Graph {
    let n = rng.random_range(2..10);
    let d = rng.random_range(1..6);
    let classes = rng.random_range(2..4);
    let x = Array2::from_shape_fn((n, d), |_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random::<f64>() < 0.3 {
                edges.push((a, b));
            }
        }
    }
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Graph::new(x, edges, labels, classes, None).expect("valid random graph")
}

fn activation(rng: &mut ChaCha8Rng) -> Activation {
    [Activation::Identity, Activation::Relu, Activation::Sigmoid, Activation::Tanh][rng.random_range(0..4)]
}

/// Activations that cannot zero a whole slot; a dead ReLU slot has no direction.
fn smooth_activation(rng: &mut ChaCha8Rng) -> Activation {
    [Activation::Identity, Activation::Sigmoid, Activation::Tanh][rng.random_range(0..3)]
}

fn one_case(rng: &mut ChaCha8Rng, w: &mut Worst) -> Result<(), String> {
    let err = |e: proia::Error| e.to_string();

    // victim posteriors from untrained backbones of every kind
    let g = random_graph(rng);
    let kind = [BackboneKind::Gcn, BackboneKind::Gat, BackboneKind::Sage][rng.random_range(0..3)];
    let spec = BackboneSpec { kind, hidden_dim: 6, epochs: 0, ..BackboneSpec::default() };
    let m = train_victim(&g, &[0], &spec, None, rng.random()).map_err(err)?;
    let all: Vec<usize> = (0..g.node_count()).collect();
    w.rows(&query_posteriors(&m, &g, &all, None).map_err(err)?);

    // routing weights and updates
    let dim = rng.random_range(2..6);
    let center = unit_vec(rng, dim);
    let neigh: Vec<Array1<f64>> = (0..rng.random_range(1..6)).map(|_| unit_vec(rng, dim)).collect();
    let tau = rng.random_range(0.05..5.0);
    let (agg, weights) = routing_step(&center, &neigh, tau).map_err(err)?;
    w.probs(&weights);
    if let Ok(d) = update_rep(&center, &agg) {
        w.unit(d.view());
    }

    // channel slots
    let (pd, m_in, k, dk) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..4), rng.random_range(1..4));
    let params = ChannelParams {
        gate_w1: normal(rng, pd, 3, 1.0),
        gate_b1: normal_vec(rng, 3, 1.0),
        gate_w2: normal(rng, 3, m_in, 1.0),
        gate_b2: normal_vec(rng, m_in, 1.0) + 1.0,
        weights: (0..k).map(|_| normal(rng, m_in, dk, 1.0)).collect(),
        biases: (0..k).map(|_| normal_vec(rng, dk, 0.5)).collect(),
        activation: activation(rng),
    };
    if let Ok(slots) = channel_map(&normal_vec(rng, pd, 1.0), &normal_vec(rng, m_in, 1.0), &params) {
        for s in &slots {
            w.unit(s.view());
        }
    }

    // routed channel representations; width 1 lets a slot cancel its neighbour exactly
    let n = rng.random_range(1..8);
    let rk = rng.random_range(2..5);
    let slots: Vec<Array2<f64>> = (0..k)
        .map(|_| {
            let mut s = normal(rng, n, rk, 1.0);
            for mut r in s.rows_mut() {
                let norm = r.dot(&r).sqrt();
                r /= norm;
            }
            s
        })
        .collect();
    let neighbors: Vec<Vec<usize>> = (0..n).map(|_| (0..n).filter(|_| rng.random::<f64>() < 0.4).collect()).collect();
    for out in route(&slots, &neighbors, rng.random_range(1..4), tau).map_err(err)? {
        for r in out.rows() {
            w.unit(r);
        }
    }

    // attack head posteriors and routed rows
    let rows = rng.random_range(4..10);
    let width = rng.random_range(1..5);
    let ds = AttackDataset {
        kind: AttackKind::Mia,
        rows: Array2::from_shape_fn((rows, width), |_| rng.random::<f64>()),
        labels: (0..rows).map(|i| i % 2).collect(),
        nodes: (0..rows).collect(),
        origins: vec![Origin::ShadowTrain; rows],
        num_classes: 2,
        prompts: Some(normal(rng, rows, 2, 1.0)),
    };
    let channels = rng.random_range(1..4);
    let cfg = DisentangleConfig {
        channels,
        dim: channels * rng.random_range(2..5),
        depth: rng.random_range(1..3),
        prompt_hidden: 3,
        head_hidden: 3,
        knn: rng.random_range(1..4),
        tau,
        activation: smooth_activation(rng),
        epochs: 0,
        seed: rng.random(),
        ..DisentangleConfig::default()
    };
    let AttackHead::Disentangle(head) = train_attack(&ds, &cfg).map_err(err)?.head else {
        return Err("expected a disentangled head".into());
    };
    let queries = Array2::from_shape_fn((3, width), |_| rng.random::<f64>());
    let (p_a, q_d, routed) = head.evaluate(&queries, &normal(rng, 3, 2, 1.0)).map_err(err)?;
    w.rows(&p_a);
    w.rows(&q_d);
    for r in routed.rows() {
        w.unit(r);
    }

    // KL terms
    let len = rng.random_range(1..6);
    let p = distribution(rng, len, true);
    let q = distribution(rng, len, false);
    w.kl(kl_divergence(&p, &q).map_err(err)?);
    w.kl(kl_divergence(&q, &q).map_err(err)?);
    let mu = normal(rng, 3, 4, 2.0);
    let sigma = normal(rng, 3, 4, 1.0).mapv(|v| v.abs() + 1e-3);
    w.kl(attribute_kl(&mu, &sigma).map_err(err)?);
    w.kl(membership_kl(&normal(rng, 5, 1, 2.0), rng.random_range(0.01..3.0)).map_err(err)?);
    Ok(())
}

/// Run `cases` random parameterisations and report the worst deviations.
pub fn normalization_sweep(cases: usize, seed: u64) -> Result<Worst, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Worst::new();
    for c in 0..cases {
        one_case(&mut rng, &mut w).map_err(|e| format!("case {c}: {e}"))?;
    }
    Ok(w)
}
