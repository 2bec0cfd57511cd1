use std::collections::BTreeMap;

use super::{euclidean, NOISE};
use crate::error::{Error, Result};

/// Joint counts `(true class, predicted cluster) -> n`.
pub fn contingency<A: Ord + Copy, B: Ord + Copy>(
    truth: &[A],
    pred: &[B],
) -> BTreeMap<(A, B), usize> {
    let mut m = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *m.entry((t, p)).or_insert(0) += 1;
    }
    m
}

/// `1 − H(C|K)/H(C)` with natural-log entropies; 1 when `H(C) = 0`. The
/// noise label is treated as one more cluster.
pub fn homogeneity(truth: &[i64], pred: &[i64]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::data(
            "homogeneity needs equal-length, non-empty label vectors",
        ));
    }
    let n = truth.len() as f64;
    let joint = contingency(truth, pred);
    let mut class_counts: BTreeMap<i64, usize> = BTreeMap::new();
    let mut cluster_counts: BTreeMap<i64, usize> = BTreeMap::new();
    for (&(c, k), &v) in &joint {
        *class_counts.entry(c).or_insert(0) += v;
        *cluster_counts.entry(k).or_insert(0) += v;
    }
    let h_c: f64 = -class_counts
        .values()
        .map(|&v| {
            let p = v as f64 / n;
            p * p.ln()
        })
        .sum::<f64>();
    if h_c == 0.0 {
        return Ok(1.0);
    }
    let h_c_given_k: f64 = -joint
        .iter()
        .map(|(&(_, k), &v)| {
            let nk = cluster_counts[&k] as f64;
            (v as f64 / n) * (v as f64 / nk).ln()
        })
        .sum::<f64>();
    Ok((1.0 - h_c_given_k / h_c).clamp(0.0, 1.0))
}

/// Mean silhouette over non-noise points. Singleton clusters score 0, as
/// do points with `a = b = 0`.
pub fn silhouette(points: &[Vec<f64>], labels: &[i64]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::data("points and labels differ in length"));
    }
    let idx: Vec<usize> = (0..points.len()).filter(|&i| labels[i] != NOISE).collect();
    let mut members: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for &i in &idx {
        members.entry(labels[i]).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::data(format!(
            "silhouette needs >= 2 clusters, got {}",
            members.len()
        )));
    }
    let mut total = 0.0;
    for &i in &idx {
        let own = &members[&labels[i]];
        if own.len() == 1 {
            continue;
        }
        let mean_to = |group: &[usize]| {
            group
                .iter()
                .map(|&j| euclidean(&points[i], &points[j]))
                .sum::<f64>()
        };
        let a = mean_to(own) / (own.len() - 1) as f64;
        let b = members
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, g)| mean_to(g) / g.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / idx.len() as f64)
}
