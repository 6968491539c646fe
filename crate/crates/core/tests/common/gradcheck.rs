//! Central-difference gradient checks for the training objectives.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use proia::attack_data::{AttackDataset, AttackKind, Origin};
use proia::disentangle::{train_attack, AttackHead, DisentangleConfig, DisentangleHead};
use proia::graph::SyntheticSpec;
use proia::nn::{Activation, Params};
use proia::pretrain::{Encoder, LossParts, LossTerm, PretrainConfig, PretrainViews};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// Relative error `|a - n| / max(|a|, |n|)` over the flattened gradient.
pub fn relative_error(analytic: &[Array2<f64>], numeric: &[Array2<f64>]) -> f64 {
    let mut diff = 0.0;
    let mut a_norm = 0.0;
    let mut n_norm = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        diff += (a - n).mapv(|x| x * x).sum();
        a_norm += a.mapv(|x| x * x).sum();
        n_norm += n.mapv(|x| x * x).sum();
    }
    diff.sqrt() / a_norm.sqrt().max(n_norm.sqrt()).max(1e-12)
}

pub fn numeric_grads(params: &Params, mut loss: impl FnMut(&Params) -> f64) -> Vec<Array2<f64>> {
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for slot in 0..params.len() {
        let mut g = Array2::zeros(params.get(slot).raw_dim());
        for idx in ndarray::indices(params.get(slot).raw_dim()) {
            let orig = work.get(slot)[idx];
            work.get_mut(slot)[idx] = orig + STEP;
            let up = loss(&work);
            work.get_mut(slot)[idx] = orig - STEP;
            let down = loss(&work);
            work.get_mut(slot)[idx] = orig;
            g[idx] = (up - down) / (2.0 * STEP);
        }
        out.push(g);
    }
    out
}

pub fn toy_encoder(activation: Activation) -> (Encoder, PretrainViews, Vec<usize>, Vec<usize>) {
    let spec = SyntheticSpec {
        blocks: vec![5, 5],
        p_intra: 0.5,
        p_inter: 0.1,
        feature_dim: 6,
        feature_on: 0.6,
        feature_off: 0.2,
        ..SyntheticSpec::default()
    };
    let g = spec.generate(7).unwrap();
    let cfg = PretrainConfig {
        hidden_dim: 4,
        // large enough that the KL terms matter in the finite differences
        beta_a: 0.3,
        beta_m: 0.2,
        bilinear_activation: activation,
        seed: 3,
        ..PretrainConfig::default()
    };
    let views = PretrainViews::build(&g, &cfg).unwrap();
    let mut enc = Encoder::new(g.feature_dim(), g.num_classes(), &cfg).unwrap();
    // a zero input bias puts featureless nodes exactly on the ReLU kink
    let slot = enc.params.names().iter().position(|n| n == "b_in").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    enc.params.get_mut(slot).mapv_inplace(|_| rng.random_range(-0.5..0.5));
    (enc, views, g.labels().to_vec(), vec![0, 2, 5, 8])
}

pub fn pick(parts: &LossParts, term: LossTerm) -> f64 {
    match term {
        LossTerm::Contrastive => parts.contrastive,
        LossTerm::InformationBottleneck => parts.ib,
        LossTerm::Total => parts.total,
    }
}

pub fn check_encoder(term: LossTerm, activation: Activation) -> f64 {
    let (enc, views, labels, nodes) = toy_encoder(activation);
    let (_, analytic) = enc.loss_and_grads(&views, &labels, &nodes, 11, term).unwrap();
    let mut probe = enc.clone();
    let numeric = numeric_grads(&enc.params, |p| {
        probe.params = p.clone();
        let (parts, _) = probe.loss_and_grads(&views, &labels, &nodes, 11, term).unwrap();
        pick(&parts, term)
    });
    relative_error(&analytic, &numeric)
}

pub fn toy_attack_dataset(rows: usize, width: usize, prompt_width: usize) -> AttackDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let data = Array2::from_shape_fn((rows, width), |_| rng.random::<f64>());
    let labels: Vec<usize> = (0..rows).map(|i| i % 2).collect();
    let prompts = Array2::from_shape_fn((rows, prompt_width), |_| rng.random::<f64>());
    AttackDataset {
        kind: AttackKind::Mia,
        rows: data,
        labels,
        nodes: (0..rows).collect(),
        origins: vec![Origin::ShadowTrain; rows],
        num_classes: 2,
        prompts: Some(prompts),
    }
}

pub fn toy_head(activation: Activation, lambda: f64) -> (DisentangleHead, Vec<usize>) {
    let ds = toy_attack_dataset(8, 5, 3);
    let cfg = DisentangleConfig {
        channels: 2,
        routing_iters: 2,
        depth: 2,
        dim: 4,
        prompt_hidden: 3,
        head_hidden: 3,
        knn: 3,
        lambda,
        activation,
        epochs: 0,
        seed: 5,
        ..DisentangleConfig::default()
    };
    let model = train_attack(&ds, &cfg).unwrap();
    let labels = ds.train_indices().iter().map(|&i| ds.labels[i]).collect();
    match model.head {
        AttackHead::Disentangle(h) => (h, labels),
        AttackHead::Mlp(_) => unreachable!(),
    }
}

pub fn check_head(activation: Activation, lambda: f64) -> f64 {
    let (head, labels) = toy_head(activation, lambda);
    let (_, analytic) = head.loss_and_grads(&labels);
    let mut probe = head.clone();
    let numeric = numeric_grads(&head.params, |p| {
        probe.params = p.clone();
        probe.loss_and_grads(&labels).0
    });
    relative_error(&analytic, &numeric)
}
