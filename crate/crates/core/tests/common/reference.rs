//! Brute-force references for graph and metric primitives, and randomised
//! sweeps comparing the library against them.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use proia::graph::{jaccard_similarity, khop_subgraph, Graph};
use proia::metrics::{accuracy, auc_roc, weighted_f1};

pub fn brute_jaccard(a: &[f64], b: &[f64]) -> f64 {
    let sa: BTreeSet<usize> = (0..a.len()).filter(|&i| a[i] != 0.0).collect();
    let sb: BTreeSet<usize> = (0..b.len()).filter(|&i| b[i] != 0.0).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        0.0
    } else {
        sa.intersection(&sb).count() as f64 / union as f64
    }
}

/// Nodes within `k` hops by repeated frontier expansion over the edge list.
pub fn brute_khop(n: usize, edges: &[(usize, usize)], v: usize, k: usize) -> Vec<usize> {
    let mut reach = vec![false; n];
    reach[v] = true;
    for _ in 0..k {
        let before = reach.clone();
        for &(a, b) in edges {
            if before[a] {
                reach[b] = true;
            }
            if before[b] {
                reach[a] = true;
            }
        }
    }
    (0..n).filter(|&u| reach[u]).collect()
}

pub fn brute_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Weighted F1 from an explicit confusion matrix.
pub fn confusion_f1(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut cm = vec![vec![0usize; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        cm[t][p] += 1;
    }
    let mut total = 0.0;
    for c in 0..classes {
        let support: usize = cm[c].iter().sum();
        if support == 0 {
            continue;
        }
        let tp = cm[c][c] as f64;
        let predicted: usize = (0..classes).map(|r| cm[r][c]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = tp / support as f64;
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        total += f1 * support as f64;
    }
    total / truth.len() as f64
}

/// Exact agreement on `trials` random sparse integer vector pairs.
pub fn jaccard_sweep(trials: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let d = rng.random_range(1..12);
        let density = rng.random::<f64>();
        let mut draw = || {
            (0..d)
                .map(|_| if rng.random::<f64>() < density { rng.random_range(1..4) as f64 } else { 0.0 })
                .collect::<Vec<_>>()
        };
        let (a, b) = (draw(), draw());
        let got = jaccard_similarity(&a, &b).map_err(|e| e.to_string())?;
        let want = brute_jaccard(&a, &b);
        if got != want {
            return Err(format!("trial {t}: jaccard {a:?} {b:?} = {got}, reference {want}"));
        }
    }
    Ok(trials)
}

/// Exact agreement of node sets and induced edges on random graphs.
pub fn khop_sweep(trials: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let n = rng.random_range(1..14);
        let p = rng.random::<f64>() * 0.5;
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((a, b));
                }
            }
        }
        let g = Graph::new(Array2::eye(n), edges.clone(), vec![0; n], 1, None).map_err(|e| e.to_string())?;
        let v = rng.random_range(0..n);
        let k = rng.random_range(0..4);
        let (sub, mapping) = khop_subgraph(&g, v, k).map_err(|e| e.to_string())?;
        let expected = brute_khop(n, &edges, v, k);
        if mapping != expected {
            return Err(format!("trial {t}: {k}-hop of {v} gave {mapping:?}, reference {expected:?}"));
        }
        let induced: Vec<(usize, usize)> = edges
            .iter()
            .filter(|(a, b)| expected.contains(a) && expected.contains(b))
            .map(|(a, b)| (expected.binary_search(a).unwrap(), expected.binary_search(b).unwrap()))
            .collect();
        if sub.edges() != induced.as_slice() {
            return Err(format!("trial {t}: induced edges {:?}, reference {induced:?}", sub.edges()));
        }
    }
    Ok(trials)
}

/// Agreement within `1e-9` on random tied scores; single-class draws must error.
pub fn auc_sweep(trials: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    while checked < trials {
        let n = rng.random_range(2..200);
        // coarse scores force ties
        let levels = rng.random_range(2..20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            if auc_roc(&scores, &labels).is_ok() {
                return Err("single-class labels accepted".into());
            }
            continue;
        }
        let got = auc_roc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = brute_auc(&scores, &labels);
        if (got - want).abs() >= 1e-9 {
            return Err(format!("trial {checked}: auc {got}, reference {want}"));
        }
        checked += 1;
    }
    Ok(trials)
}

/// Weighted F1 within `1e-9` and exact accuracy on random predictions.
pub fn f1_sweep(trials: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let n = rng.random_range(1..60);
        let classes = rng.random_range(1..6);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let got = weighted_f1(&pred, &truth).map_err(|e| e.to_string())?;
        let want = confusion_f1(&pred, &truth, classes);
        if (got - want).abs() >= 1e-9 {
            return Err(format!("trial {t}: weighted F1 {got}, reference {want}"));
        }
        let correct = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
        if accuracy(&pred, &truth).map_err(|e| e.to_string())? != correct as f64 / n as f64 {
            return Err(format!("trial {t}: accuracy disagrees with count"));
        }
    }
    Ok(trials)
}
