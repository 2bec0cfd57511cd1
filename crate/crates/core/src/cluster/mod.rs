//! Clustering of latent vectors and construction of the class catalog.

pub(crate) mod catalog;
mod dbscan;
mod kmeans;
mod metrics;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use catalog::{build_catalog, CatalogParams, ClassCatalog, ClassEntry, IntensityLabel};
pub use dbscan::{dbscan, dbscan_labels};
pub use kmeans::{kmeans, kmeans_points, KMeansFit};
pub use metrics::{contingency, homogeneity, silhouette};

pub const NOISE: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Dbscan,
    Kmeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClusterParams {
    Dbscan {
        eps: f64,
        min_pts: usize,
    },
    Kmeans {
        k: usize,
        seed: u64,
        max_iter: usize,
        tol: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub algorithm: Algorithm,
    pub params: ClusterParams,
    pub labels: BTreeMap<String, i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroids: Option<Vec<Vec<f64>>>,
}

impl ClusterResult {
    pub fn num_clusters(&self) -> usize {
        self.labels
            .values()
            .filter(|&&l| l >= 0)
            .max()
            .map_or(0, |m| *m as usize + 1)
    }

    pub fn noise_count(&self) -> usize {
        self.labels.values().filter(|&&l| l == NOISE).count()
    }

    /// Nearest centroid, ties to the lowest index.
    pub fn predict_nearest(&self, x: &[f64]) -> Result<usize> {
        let centroids = self
            .centroids
            .as_ref()
            .ok_or_else(|| Error::data("predict_nearest needs a centroid-based clustering"))?;
        if let Some(c) = centroids.first() {
            if c.len() != x.len() {
                return Err(Error::Dimension {
                    expected: c.len(),
                    got: x.len(),
                });
            }
        }
        Ok(nearest(centroids, x).0)
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// `(index, squared distance)` of the closest centroid; ties to lowest index.
pub(crate) fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}
