//! Episode metrics: macro F1, mistake severity and summary statistics.

use serde::{Deserialize, Serialize};

use crate::error::{StatsError, TreeError};
use crate::tree::{ClassTree, NodeId};

/// `confusion[t][p]` counts queries of true class `t` predicted as `p`.
pub fn confusion<T: PartialEq>(predictions: &[T], truths: &[T], classes: &[T]) -> Result<Vec<Vec<usize>>, StatsError> {
    if predictions.len() != truths.len() {
        return Err(StatsError::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() || classes.is_empty() {
        return Err(StatsError::Empty);
    }
    let index = |x: &T, pos: usize| classes.iter().position(|c| c == x).ok_or(StatsError::UnknownLabel(pos));
    let mut m = vec![vec![0; classes.len()]; classes.len()];
    for (i, (p, t)) in predictions.iter().zip(truths).enumerate() {
        m[index(t, i)?][index(p, i)?] += 1;
    }
    Ok(m)
}

/// Unweighted mean over `classes` of `2TP / (2TP + FP + FN)`. A class that is
/// neither predicted nor present scores 0.
pub fn macro_f1<T: PartialEq>(predictions: &[T], truths: &[T], classes: &[T]) -> Result<f64, StatsError> {
    let m = confusion(predictions, truths, classes)?;
    Ok(macro_f1_from_confusion(&m))
}

pub fn macro_f1_from_confusion(m: &[Vec<usize>]) -> f64 {
    let k = m.len();
    let mut total = 0.0;
    for c in 0..k {
        let tp = m[c][c] as f64;
        let fn_: f64 = (0..k).filter(|&j| j != c).map(|j| m[c][j] as f64).sum();
        let fp: f64 = (0..k).filter(|&j| j != c).map(|j| m[j][c] as f64).sum();
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            total += 2.0 * tp / denom;
        }
    }
    total / k as f64
}

/// Mean LCA height over the misclassified queries; `None` without mistakes.
pub fn mistake_severity(predictions: &[NodeId], truths: &[NodeId], tree: &ClassTree) -> Result<Option<f64>, TreeError> {
    let mut sum = 0usize;
    let mut n = 0usize;
    for (&p, &t) in predictions.iter().zip(truths) {
        if p.0 >= tree.nodes().len() {
            return Err(TreeError::NotALeaf(p.0));
        }
        if t.0 >= tree.nodes().len() {
            return Err(TreeError::NotALeaf(t.0));
        }
        if p != t {
            sum += tree.lca_height(p, t)?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum as f64 / n as f64))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Distribution {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
            min: v[0],
            max: v[v.len() - 1],
        })
    }
}
