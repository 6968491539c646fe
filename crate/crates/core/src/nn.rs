//! Parameter storage, initialisation, the Adam optimiser and seeding helpers
//! shared by every trainable model.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Derive an independent sub-seed from a base seed and a stage tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // splitmix64 over the tag bytes
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    let mut mix = |x: u64| {
        state = state.wrapping_add(x).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let mut out = mix(0);
    for b in tag.bytes() {
        out = mix(b as u64);
    }
    out
}

pub fn rng_from(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// Glorot-uniform matrix.
pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// Named, ordered collection of parameter matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a parameter, returning its slot.
    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, slot: usize) -> &Array2<f64> {
        &self.values[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Array2<f64> {
        &mut self.values[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Register every parameter as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    /// Register every parameter as a constant (frozen forward pass).
    pub fn register_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.constant(v.clone())).collect()
    }

    /// Collect gradients for the registered vars in slot order.
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Gradients) -> Vec<Array2<f64>> {
        vars.iter()
            .zip(&self.values)
            .map(|(&v, p)| grads.take_or_zeros(v, p.dim()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }
}

/// Adam with optional coupled L2 weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64, weight_decay: f64) -> Self {
        let zeros = |p: &Array2<f64>| Array2::zeros(p.dim());
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.values().iter().map(zeros).collect(),
            v: params.values().iter().map(zeros).collect(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Array2<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let mut g = g.clone();
            if self.weight_decay > 0.0 {
                g.scaled_add(self.weight_decay, p);
            }
            let (b1, b2) = (self.beta1, self.beta2);
            self.m[i].zip_mut_with(&g, |m, &gv| *m = b1 * *m + (1.0 - b1) * gv);
            self.v[i].zip_mut_with(&g, |v, &gv| *v = b2 * *v + (1.0 - b2) * gv * gv);
            let (lr, eps) = (self.lr, self.eps);
            ndarray::Zip::from(p).and(&self.m[i]).and(&self.v[i]).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Fail with [`Error::Diverged`] when a training loss stops being finite.
pub fn ensure_finite(loss: f64, epoch: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, what: format!("{what} loss is {loss}") })
    }
}

/// Element-wise activation used by several layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    #[default]
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Row-wise argmax.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
