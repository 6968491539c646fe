//! Classification metrics for attack evaluation.

use crate::error::{Error, Result};

fn check_pair(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::EmptyInput("no predictions".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// Support-weighted mean of per-class F1 over the classes present in `truth`.
pub fn weighted_f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth)?;
    let classes = pred.iter().chain(truth).max().copied().unwrap_or(0) + 1;
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        predicted[p] += 1;
        support[t] += 1;
        if p == t {
            tp[t] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..classes {
        if support[c] == 0 {
            continue;
        }
        let denom = predicted[c] + support[c];
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp[c] as f64 / denom as f64 };
        total += f1 * support[c] as f64;
    }
    Ok(total / truth.len() as f64)
}

fn check_binary(scores: &[f64], labels: &[usize]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::LabelOutOfRange { label: bad, classes: 2 });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::SingleClass(0));
    }
    if neg == 0 {
        return Err(Error::SingleClass(1));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via average ranks; tied scores count one half.
pub fn auc_roc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Macro-averaged one-vs-rest AUC over classes with both positives and
/// negatives. `scores[i][c]` is the score of row `i` for class `c`.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let classes = scores.first().map(Vec::len).unwrap_or(0);
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..classes {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let y: Vec<usize> = labels.iter().map(|&l| usize::from(l == c)).collect();
        match auc_roc(&s, &y) {
            Ok(a) => {
                total += a;
                used += 1;
            }
            Err(Error::SingleClass(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::SingleClass(labels.first().copied().unwrap_or(0)));
    }
    Ok(total / used as f64)
}

/// ROC points `(fpr, tpr)` from the strictest threshold down, starting at
/// `(0, 0)` and ending at `(1, 1)`. Tied scores form a single step.
pub fn roc_curve(scores: &[f64], labels: &[usize]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (idx, &k) in order.iter().enumerate() {
        if labels[k] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = idx + 1 == order.len() || scores[order[idx + 1]] != scores[k];
        if last_of_tie {
            points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        }
    }
    Ok(points)
}

/// True-negative and true-positive rates of binary predictions.
pub fn tn_tp_rates(pred: &[usize], truth: &[usize]) -> Result<(f64, f64)> {
    check_pair(pred, truth)?;
    let (mut tn, mut neg, mut tp, mut pos) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        if t == 1 {
            pos += 1;
            tp += usize::from(p == 1);
        } else {
            neg += 1;
            tn += usize::from(p == t);
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((rate(tn, neg), rate(tp, pos)))
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
