use super::Network;

/// RMSProp: `s ← ρ·s + (1−ρ)·g²`, `p ← p − lr·g / (√s + ε)`.
///
/// State is allocated lazily on the first step and bound to one network's
/// parameter layout.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    state: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64, rho: f64, eps: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!(rho > 0.0 && rho < 1.0, "rho must lie in (0, 1)");
        Self {
            lr,
            rho,
            eps,
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network) {
        let tensors = net.params_and_grads();
        if self.state.is_empty() {
            self.state = tensors.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
        }
        assert_eq!(
            self.state.len(),
            tensors.len(),
            "optimizer bound to another network"
        );
        for ((params, grads), state) in tensors.into_iter().zip(&mut self.state) {
            for ((p, &g), s) in params.iter_mut().zip(grads).zip(state.iter_mut()) {
                *s = self.rho * *s + (1.0 - self.rho) * g * g;
                *p -= self.lr * g / (s.sqrt() + self.eps);
            }
        }
    }
}
