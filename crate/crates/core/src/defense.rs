//! Output-noise and query-neighbourhood defenses applied at query time.

use std::collections::HashSet;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Adjacency, Graph};
use crate::nn::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    /// Gaussian noise on released posteriors.
    Vandp,
    /// Degree-preserving rewiring of query-node neighbourhoods.
    Neighb,
}

impl std::fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DefenseKind::Vandp => "vandp",
            DefenseKind::Neighb => "neighb",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    /// Noise standard deviation for `vandp`.
    #[serde(default = "default_budget")]
    pub budget: f64,
    /// Fraction of each query node's edges rewired by `neighb`.
    #[serde(default = "default_rate")]
    pub perturb_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_budget() -> f64 {
    0.2
}

fn default_rate() -> f64 {
    0.2
}

impl DefenseSpec {
    pub fn new(kind: DefenseKind) -> Self {
        Self { kind, budget: default_budget(), perturb_rate: default_rate(), seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0) {
            return Err(Error::InvalidParameter(format!("defense budget {} must be positive", self.budget)));
        }
        if !(0.0..=1.0).contains(&self.perturb_rate) {
            return Err(Error::InvalidParameter(format!("perturb_rate {} not in [0,1]", self.perturb_rate)));
        }
        Ok(())
    }
}

/// Add `N(0, budget^2)` noise to every entry, clip at zero and renormalise
/// each row. A row clipped to all zeros becomes uniform.
pub fn vandp_noise(posteriors: &Array2<f64>, budget: f64, seed: u64) -> Result<Array2<f64>> {
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(Error::InvalidParameter(format!("noise budget {budget} must be positive")));
    }
    let normal = Normal::new(0.0, budget).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = rng_from(seed, "vandp");
    let mut out = posteriors.mapv(|p| (p + normal.sample(&mut rng)).max(0.0));
    for mut row in out.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            let c = row.len() as f64;
            row.fill(1.0 / c);
        }
    }
    Ok(out)
}

/// Query-time adjacency where a `rate` share (rounded) of each query node's
/// incoming edges is redirected to random non-neighbours. Other nodes keep
/// their lists; the graph itself is not modified.
pub fn neighb_perturb(g: &Graph, query_nodes: &[usize], rate: f64, seed: u64) -> Result<Adjacency> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!("perturb rate {rate} not in [0,1]")));
    }
    let n = g.node_count();
    let mut adj = g.adjacency();
    let mut rng = rng_from(seed, "neighb");
    let mut seen = HashSet::new();
    for &v in query_nodes {
        if v >= n {
            return Err(Error::NodeOutOfRange { index: v, count: n });
        }
        if !seen.insert(v) {
            continue;
        }
        let list = &mut adj.neighbors[v];
        let m = (rate * list.len() as f64).round() as usize;
        if m == 0 {
            continue;
        }
        let mut taken: HashSet<usize> = list.iter().copied().collect();
        taken.insert(v);
        let mut candidates: Vec<usize> = (0..n).filter(|u| !taken.contains(u)).collect();
        let mut slots: Vec<usize> = (0..list.len()).collect();
        slots.shuffle(&mut rng);
        for &slot in slots.iter().take(m) {
            let Some(&u) = candidates.choose(&mut rng) else { break };
            candidates.retain(|&c| c != u);
            list[slot] = u;
        }
        list.sort_unstable();
    }
    Ok(adj)
}
