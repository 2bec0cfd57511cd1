use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Matrix, Mode, Network};
use crate::error::Result;

const STEP: f64 = 1e-4;
/// Gradients below this magnitude are compared in absolute terms.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params_checked: usize,
    pub inputs_checked: usize,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Checks backward against central differences (`h = 1e-4`) on up to
/// `max_params` sampled parameters plus every input entry, using a random
/// linear functional of the output as the loss. Batch norm is evaluated
/// with batch statistics so the loss is a pure function of the parameters.
pub fn grad_check(
    net: &mut Network,
    x: &Matrix,
    max_params: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = Array2::from_shape_fn((x.nrows(), net.output_dim()), |_| {
        rng.random_range(-1.0..1.0)
    });
    grad_check_with(net, x, max_params, seed, |y| {
        ((y * &probe).sum(), probe.clone())
    })
}

/// As [`grad_check`] with a caller-supplied loss returning `(L, dL/dy)`.
pub fn grad_check_with<F>(
    net: &mut Network,
    x: &Matrix,
    max_params: usize,
    seed: u64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Matrix) -> (f64, Matrix),
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    net.zero_grad();
    let y = net.forward(x, Mode::BatchStats)?;
    let (_, dy) = loss(&y);
    let dx = net.backward(&dy)?;
    let analytic = net.flat_grads();

    let eval = |net: &mut Network, x: &Matrix| -> Result<f64> {
        Ok(loss(&net.forward(x, Mode::BatchStats)?).0)
    };

    let total = analytic.len();
    let picks = sample(&mut rng, total, max_params.min(total)).into_vec();
    let mut worst = 0.0f64;
    for &idx in &picks {
        let orig = nth_param(net, idx, None);
        nth_param(net, idx, Some(orig + STEP));
        let up = eval(net, x)?;
        nth_param(net, idx, Some(orig - STEP));
        let down = eval(net, x)?;
        nth_param(net, idx, Some(orig));
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(rel_error(analytic[idx], numeric));
    }

    let mut xp = x.clone();
    for i in 0..x.len() {
        let (r, c) = (i / x.ncols(), i % x.ncols());
        let orig = xp[[r, c]];
        xp[[r, c]] = orig + STEP;
        let up = eval(net, &xp)?;
        xp[[r, c]] = orig - STEP;
        let down = eval(net, &xp)?;
        xp[[r, c]] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(rel_error(dx[[r, c]], numeric));
    }
    net.clear_cache();

    Ok(GradCheckReport {
        max_rel_error: worst,
        params_checked: picks.len(),
        inputs_checked: x.len(),
    })
}

/// Reads (and optionally overwrites) the `idx`-th flattened parameter.
fn nth_param(net: &mut Network, mut idx: usize, set: Option<f64>) -> f64 {
    for (p, _) in net.params_and_grads() {
        if idx < p.len() {
            let old = p[idx];
            if let Some(v) = set {
                p[idx] = v;
            }
            return old;
        }
        idx -= p.len();
    }
    panic!("parameter index out of range");
}
