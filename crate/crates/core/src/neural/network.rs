use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::LayerSpec;
use super::{BatchNorm, Dense, Layer, Matrix, Mode, Relu};
use crate::error::{Error, Result};

pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::config(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    w[0].output_dim(),
                    i + 1,
                    w[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Dense stack over `dims` with ReLU between affine layers and an
    /// optional batch norm before each hidden ReLU.
    pub fn mlp<R: Rng>(dims: &[usize], batch_norm: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "mlp needs input and output dims");
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            layers.push(Layer::Dense(Dense::new(w[0], w[1], rng)));
            if i + 2 < dims.len() {
                if batch_norm {
                    layers.push(Layer::BatchNorm(BatchNorm::new(w[1])));
                }
                layers.push(Layer::Relu(Relu::new(w[1])));
            }
        }
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode);
        }
        Ok(h)
    }

    /// Inference on an immutable network.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h);
        }
        Ok(h)
    }

    /// Accumulates parameter gradients for the last cached forward and
    /// returns the gradient with respect to the input.
    pub fn backward(&mut self, dy: &Matrix) -> Result<Matrix> {
        if dy.ncols() != self.output_dim() {
            return Err(Error::Dimension {
                expected: self.output_dim(),
                got: dy.ncols(),
            });
        }
        let mut g = dy.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(Layer::zero_grad);
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn params_and_grads(&mut self) -> Vec<(&mut [f64], &[f64])> {
        self.layers
            .iter_mut()
            .flat_map(Layer::params_and_grads)
            .collect()
    }

    pub fn param_count(&mut self) -> usize {
        self.params_and_grads().iter().map(|(p, _)| p.len()).sum()
    }

    /// Trainable parameters, flattened in a fixed order.
    pub fn flat_params(&mut self) -> Vec<f64> {
        self.params_and_grads()
            .into_iter()
            .flat_map(|(p, _)| p.to_vec())
            .collect()
    }

    pub fn flat_grads(&mut self) -> Vec<f64> {
        self.params_and_grads()
            .into_iter()
            .flat_map(|(_, g)| g.to_vec())
            .collect()
    }

    /// Clamps every trainable parameter into `[-c, c]`.
    pub fn clip_weights(&mut self, c: f64) {
        for (p, _) in self.params_and_grads() {
            p.iter_mut().for_each(|v| *v = v.clamp(-c, c));
        }
    }

    pub fn max_abs_param(&mut self) -> f64 {
        self.flat_params().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&mut self) -> bool {
        self.flat_params().iter().all(|v| v.is_finite())
    }

    /// SHA-256 over the bit patterns of all trainable parameters.
    pub fn fingerprint(&mut self) -> String {
        let mut h = Sha256::new();
        for v in self.flat_params() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_spec(&self) -> NetworkSpec {
        NetworkSpec {
            version: NETWORK_FORMAT_VERSION,
            layers: self.layers.iter().map(LayerSpec::from).collect(),
        }
    }

    pub fn from_spec(spec: &NetworkSpec) -> Result<Self> {
        if spec.version != NETWORK_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(spec.version));
        }
        let layers = spec
            .layers
            .iter()
            .map(Layer::try_from)
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub version: u32,
    pub layers: Vec<LayerSpec>,
}

impl Serialize for Network {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_spec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Network {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let spec = NetworkSpec::deserialize(d)?;
        Network::from_spec(&spec).map_err(serde::de::Error::custom)
    }
}
