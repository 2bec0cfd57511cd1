use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, Mode};
use crate::error::{Error, Result};

/// Affine layer `y = x Wᵀ + b` with `W` stored out × in.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
    input: Option<Matrix>,
}

impl Dense {
    /// Uniform init in ±√(6/fan_in), zero bias.
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let weight = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..bound));
        Self::from_params(weight, Array1::zeros(outputs))
    }

    pub fn from_params(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        let (o, i) = weight.dim();
        Self {
            weight,
            bias,
            grad_weight: Array2::zeros((o, i)),
            grad_bias: Array1::zeros(o),
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn forward(&mut self, x: &Matrix, mode: Mode) -> Matrix {
        let y = self.apply(x);
        self.input = mode.caches().then(|| x.clone());
        y
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn backward(&mut self, dy: &Matrix) -> Option<Matrix> {
        let x = self.input.as_ref()?;
        self.grad_weight += &dy.t().dot(x);
        self.grad_bias += &dy.sum_axis(Axis(0));
        Some(dy.dot(&self.weight))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    dim: usize,
    mask: Option<Array2<bool>>,
}

impl Relu {
    pub fn new(dim: usize) -> Self {
        Self { dim, mask: None }
    }

    fn forward(&mut self, x: &Matrix, mode: Mode) -> Matrix {
        self.mask = mode.caches().then(|| x.mapv(|v| v > 0.0));
        Self::apply(x)
    }

    fn apply(x: &Matrix) -> Matrix {
        x.mapv(|v| v.max(0.0))
    }

    fn backward(&mut self, dy: &Matrix) -> Option<Matrix> {
        let mask = self.mask.as_ref()?;
        let mut dx = dy.clone();
        ndarray::Zip::from(&mut dx).and(mask).for_each(|d, &m| {
            if !m {
                *d = 0.0
            }
        });
        Some(dx)
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Matrix,
    inv_std: Array1<f64>,
}

/// Per-feature batch normalization. Running variance uses the biased
/// batch estimate.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub grad_gamma: Array1<f64>,
    pub grad_beta: Array1<f64>,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            grad_gamma: Array1::zeros(dim),
            grad_beta: Array1::zeros(dim),
            cache: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    fn forward(&mut self, x: &Matrix, mode: Mode) -> Matrix {
        if mode == Mode::Inference {
            self.cache = None;
            return self.apply_running(x);
        }
        let n = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = &centered * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        if mode == Mode::Train {
            let m = self.momentum;
            self.running_mean = &self.running_mean * m + &mean * (1.0 - m);
            self.running_var = &self.running_var * m + &var * (1.0 - m);
        }
        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    fn apply_running(&self, x: &Matrix) -> Matrix {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        (x - &self.running_mean) * &inv_std * &self.gamma + &self.beta
    }

    fn backward(&mut self, dy: &Matrix) -> Option<Matrix> {
        let BnCache { xhat, inv_std } = self.cache.as_ref()?;
        let n = dy.nrows() as f64;
        self.grad_gamma += &(dy * xhat).sum_axis(Axis(0));
        self.grad_beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
        let dx = (&dxhat * n - &sum_dxhat - &(xhat * &sum_dxhat_xhat)) * inv_std / n;
        Some(dx)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Relu(Relu),
    BatchNorm(BatchNorm),
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.inputs(),
            Layer::Relu(r) => r.dim,
            Layer::BatchNorm(b) => b.dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.outputs(),
            Layer::Relu(r) => r.dim,
            Layer::BatchNorm(b) => b.dim(),
        }
    }

    pub(crate) fn forward(&mut self, x: &Matrix, mode: Mode) -> Matrix {
        match self {
            Layer::Dense(d) => d.forward(x, mode),
            Layer::Relu(r) => r.forward(x, mode),
            Layer::BatchNorm(b) => b.forward(x, mode),
        }
    }

    pub(crate) fn infer(&self, x: &Matrix) -> Matrix {
        match self {
            Layer::Dense(d) => d.apply(x),
            Layer::Relu(_) => Relu::apply(x),
            Layer::BatchNorm(b) => b.apply_running(x),
        }
    }

    pub(crate) fn backward(&mut self, dy: &Matrix) -> Result<Matrix> {
        let out = match self {
            Layer::Dense(d) => d.backward(dy),
            Layer::Relu(r) => r.backward(dy),
            Layer::BatchNorm(b) => b.backward(dy),
        };
        out.ok_or_else(|| Error::numeric("backward called without a cached training forward"))
    }

    pub(crate) fn zero_grad(&mut self) {
        match self {
            Layer::Dense(d) => {
                d.grad_weight.fill(0.0);
                d.grad_bias.fill(0.0);
            }
            Layer::Relu(_) => {}
            Layer::BatchNorm(b) => {
                b.grad_gamma.fill(0.0);
                b.grad_beta.fill(0.0);
            }
        }
    }

    pub(crate) fn clear_cache(&mut self) {
        match self {
            Layer::Dense(d) => d.input = None,
            Layer::Relu(r) => r.mask = None,
            Layer::BatchNorm(b) => b.cache = None,
        }
    }

    /// Trainable tensors paired with their gradients, in a fixed order.
    pub(crate) fn params_and_grads(&mut self) -> Vec<(&mut [f64], &[f64])> {
        fn pair<'a, D: ndarray::Dimension>(
            p: &'a mut ndarray::Array<f64, D>,
            g: &'a ndarray::Array<f64, D>,
        ) -> (&'a mut [f64], &'a [f64]) {
            (
                p.as_slice_mut().expect("standard layout"),
                g.as_slice().expect("standard layout"),
            )
        }
        match self {
            Layer::Dense(d) => vec![
                pair(&mut d.weight, &d.grad_weight),
                pair(&mut d.bias, &d.grad_bias),
            ],
            Layer::Relu(_) => vec![],
            Layer::BatchNorm(b) => vec![
                pair(&mut b.gamma, &b.grad_gamma),
                pair(&mut b.beta, &b.grad_beta),
            ],
        }
    }
}

/// Serialized layer; `dims` is `[in, out]` for dense layers and `[d]`
/// otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        dims: Vec<usize>,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu {
        dims: Vec<usize>,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        dims: Vec<usize>,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        momentum: f64,
        eps: f64,
    },
}

impl From<&Layer> for LayerSpec {
    fn from(layer: &Layer) -> Self {
        match layer {
            Layer::Dense(d) => LayerSpec::Dense {
                dims: vec![d.inputs(), d.outputs()],
                weight: d.weight.iter().copied().collect(),
                bias: d.bias.to_vec(),
            },
            Layer::Relu(r) => LayerSpec::Relu { dims: vec![r.dim] },
            Layer::BatchNorm(b) => LayerSpec::BatchNorm {
                dims: vec![b.dim()],
                gamma: b.gamma.to_vec(),
                beta: b.beta.to_vec(),
                running_mean: b.running_mean.to_vec(),
                running_var: b.running_var.to_vec(),
                momentum: b.momentum,
                eps: b.eps,
            },
        }
    }
}

impl TryFrom<&LayerSpec> for Layer {
    type Error = Error;

    fn try_from(spec: &LayerSpec) -> Result<Self> {
        let bad = |what: &str| Error::CorruptArtifact(format!("layer spec: {what}"));
        let vec1 = |v: &[f64], n: usize, what: &str| {
            if v.len() == n {
                Ok(Array1::from(v.to_vec()))
            } else {
                Err(bad(what))
            }
        };
        Ok(match spec {
            LayerSpec::Dense { dims, weight, bias } => {
                let [i, o] = dims[..] else {
                    return Err(bad("dense dims"));
                };
                let w = Array2::from_shape_vec((o, i), weight.clone())
                    .map_err(|_| bad("dense weight shape"))?;
                Layer::Dense(Dense::from_params(w, vec1(bias, o, "dense bias")?))
            }
            LayerSpec::Relu { dims } => {
                let [d] = dims[..] else {
                    return Err(bad("relu dims"));
                };
                Layer::Relu(Relu::new(d))
            }
            LayerSpec::BatchNorm {
                dims,
                gamma,
                beta,
                running_mean,
                running_var,
                momentum,
                eps,
            } => {
                let [d] = dims[..] else {
                    return Err(bad("batchnorm dims"));
                };
                if !(*eps > 0.0) || running_var.iter().any(|v| *v < 0.0) {
                    return Err(bad("batchnorm statistics"));
                }
                let mut b = BatchNorm::new(d);
                b.gamma = vec1(gamma, d, "gamma")?;
                b.beta = vec1(beta, d, "beta")?;
                b.running_mean = vec1(running_mean, d, "running_mean")?;
                b.running_var = vec1(running_var, d, "running_var")?;
                b.momentum = *momentum;
                b.eps = *eps;
                Layer::BatchNorm(b)
            }
        })
    }
}
