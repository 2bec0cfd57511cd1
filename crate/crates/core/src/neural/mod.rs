//! A small dense-network toolkit: affine, ReLU and batch-norm layers with
//! exact reverse-mode gradients, RMSProp, weight clipping and a
//! finite-difference gradient checker.

mod gradcheck;
mod layers;
mod network;
mod optim;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use layers::LayerSpec;
pub use layers::{BatchNorm, Dense, Layer, Relu};
pub use network::{Network, NetworkSpec, NETWORK_FORMAT_VERSION};
pub use optim::RmsProp;

use ndarray::Array2;

/// Rows are samples, columns are features.
pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches kept, batch-norm running statistics updated.
    Train,
    /// Batch statistics and caches, running statistics left untouched.
    BatchStats,
    /// Running statistics, no caches.
    Inference,
}

impl Mode {
    fn caches(self) -> bool {
        !matches!(self, Mode::Inference)
    }
}

/// Converts row vectors into a matrix. All rows must share a width.
pub fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    let width = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((rows.len(), width), flat).expect("rows must share a width")
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}
