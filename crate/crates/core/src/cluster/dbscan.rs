use std::collections::{BTreeMap, VecDeque};

use super::{euclidean, Algorithm, ClusterParams, ClusterResult, NOISE};
use crate::error::{Error, Result};

/// Neighborhoods `{q : d(p, q) ≤ eps}` (including `p`), each sorted by
/// index. Candidates are pruned with a sweep over the first coordinate.
fn neighborhoods(points: &[Vec<f64>], eps: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]).then(a.cmp(&b)));
    let mut out = vec![Vec::new(); n];
    for (pos, &i) in order.iter().enumerate() {
        let xi = points[i][0];
        out[i].push(i);
        for &j in &order[pos + 1..] {
            if points[j][0] - xi > eps {
                break;
            }
            if euclidean(&points[i], &points[j]) <= eps {
                out[i].push(j);
                out[j].push(i);
            }
        }
    }
    for list in &mut out {
        list.sort_unstable();
    }
    out
}

/// Index-aligned DBSCAN labels; `-1` marks noise. Clusters are numbered in
/// the order their first core point appears; border points go to the first
/// cluster whose expansion reaches them.
pub fn dbscan_labels(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<Vec<i64>> {
    if !(eps > 0.0) {
        return Err(Error::config(format!("eps must be > 0, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::config("min_pts must be >= 1"));
    }
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::data("points must share a non-zero dimension"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::data("points must be finite"));
    }

    let hoods = neighborhoods(points, eps);
    let core: Vec<bool> = hoods.iter().map(|h| h.len() >= min_pts).collect();
    let mut labels = vec![NOISE; points.len()];
    let mut next = 0i64;
    let mut queue = VecDeque::new();
    for seed in 0..points.len() {
        if labels[seed] != NOISE || !core[seed] {
            continue;
        }
        labels[seed] = next;
        queue.extend(hoods[seed].iter().copied());
        while let Some(q) = queue.pop_front() {
            if labels[q] != NOISE {
                continue;
            }
            labels[q] = next;
            if core[q] {
                queue.extend(hoods[q].iter().copied());
            }
        }
        next += 1;
    }
    Ok(labels)
}

/// DBSCAN over `(job_id, point)` pairs, processed in job_id order.
pub fn dbscan(
    points: &BTreeMap<String, Vec<f64>>,
    eps: f64,
    min_pts: usize,
) -> Result<ClusterResult> {
    let ids: Vec<&String> = points.keys().collect();
    let pts: Vec<Vec<f64>> = points.values().cloned().collect();
    let labels = dbscan_labels(&pts, eps, min_pts)?;
    Ok(ClusterResult {
        algorithm: Algorithm::Dbscan,
        params: ClusterParams::Dbscan { eps, min_pts },
        labels: ids.into_iter().cloned().zip(labels).collect(),
        centroids: None,
    })
}
