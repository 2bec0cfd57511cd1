use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{nearest, sq_dist, Algorithm, ClusterParams, ClusterResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // rounding can leave `target` past the end; take the last candidate
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|d| *d > 0.0).expect("total > 0");
            }
            pick
        } else {
            // all remaining points coincide with a chosen one
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points.iter().map(|p| nearest(centroids, p)).unzip()
}

/// k-means++ seeding followed by Lloyd iterations until the largest
/// centroid shift drops below `tol` or `max_iter` is reached. A cluster
/// that loses all members is re-seeded at the point farthest from its
/// assigned centroid.
pub fn kmeans_points(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansFit> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("k must be in 1..={n}, got {k}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::data("points must share a dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(points, k, &mut rng);
    let (mut labels, mut d2) = assign(points, &centroids);
    let mut history = vec![d2.iter().sum::<f64>()];
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let updated = if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(b.cmp(&a)))
                    .expect("n > 0");
                d2[far] = 0.0;
                points[far].clone()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            shift = shift.max(sq_dist(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        (labels, d2) = assign(points, &centroids);
        history.push(d2.iter().sum());
        if shift < tol {
            break;
        }
    }
    Ok(KMeansFit {
        inertia: *history.last().expect("non-empty"),
        centroids,
        labels,
        inertia_history: history,
        iterations,
    })
}

pub fn kmeans(
    points: &BTreeMap<String, Vec<f64>>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterResult> {
    let pts: Vec<Vec<f64>> = points.values().cloned().collect();
    let fit = kmeans_points(&pts, k, seed, max_iter, tol)?;
    Ok(ClusterResult {
        algorithm: Algorithm::Kmeans,
        params: ClusterParams::Kmeans {
            k,
            seed,
            max_iter,
            tol,
        },
        labels: points
            .keys()
            .cloned()
            .zip(fit.labels.iter().map(|&l| l as i64))
            .collect(),
        centroids: Some(fit.centroids),
    })
}
