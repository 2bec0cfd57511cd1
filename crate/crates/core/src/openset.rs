//! Distance-based open-set classification in logit space.
//!
//! A dense network is trained with the class-anchor-clustering loss
//! (tuplet term plus λ-weighted anchor term) against fixed scaled one-hot
//! anchors. After training the per-class mean logit vectors become the
//! class centers; a sample is assigned to the nearest center unless its
//! minimum distance exceeds the threshold τ, in which case it is UNKNOWN.
//!
//! Open-set accuracy is the balanced mean of the known-class accuracy and
//! the unknown rejection rate.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::euclidean;
use crate::error::{Error, Result};
use crate::neural::{to_matrix, Matrix, Mode, Network, RmsProp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub anchor_magnitude: f64,
    pub lambda: f64,
    pub lr: f64,
    pub rho: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Points in a threshold sweep.
    pub grid_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_dim: crate::gan::LATENT_DIM,
            hidden: vec![64, 64],
            anchor_magnitude: 10.0,
            lambda: 0.1,
            lr: 1e-3,
            rho: 0.9,
            epochs: 60,
            batch_size: 64,
            seed: 0,
            grid_size: 200,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.anchor_magnitude > 0.0) {
            return Err(Error::config("anchor_magnitude must be > 0"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda must be >= 0"));
        }
        if !(self.lr > 0.0) || !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("lr must be > 0 and rho in (0,1)"));
        }
        if self.batch_size == 0 || self.grid_size < 2 {
            return Err(Error::config("batch_size must be >= 1 and grid_size >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacLoss {
    pub tuplet: f64,
    pub anchor: f64,
    pub total: f64,
}

/// CAC loss for one logit vector and its gradient with respect to the
/// logits.
pub fn cac_loss(
    logits: &[f64],
    label: usize,
    anchors: &[Vec<f64>],
    lambda: f64,
) -> (CacLoss, Vec<f64>) {
    let n = anchors.len();
    let d: Vec<f64> = anchors.iter().map(|c| euclidean(logits, c)).collect();
    // tuplet = log(1 + Σ_{j≠y} exp(d_y − d_j)) as a log-sum-exp over {0, d_y − d_j}
    let terms: Vec<f64> = (0..n)
        .map(|j| if j == label { 0.0 } else { d[label] - d[j] })
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = terms.iter().map(|t| (t - m).exp()).collect();
    let z: f64 = weights.iter().sum();
    let tuplet = m + z.ln();

    let mut dd = vec![0.0; n];
    for j in (0..n).filter(|&j| j != label) {
        let w = weights[j] / z;
        dd[label] += w;
        dd[j] -= w;
    }
    dd[label] += lambda;

    let mut grad = vec![0.0; logits.len()];
    for (j, c) in anchors.iter().enumerate() {
        if d[j] > 0.0 && dd[j] != 0.0 {
            let s = dd[j] / d[j];
            for (g, (f, a)) in grad.iter_mut().zip(logits.iter().zip(c)) {
                *g += s * (f - a);
            }
        }
    }
    let anchor = d[label];
    (
        CacLoss {
            tuplet,
            anchor,
            total: tuplet + lambda * anchor,
        },
        grad,
    )
}

/// Mean CAC loss over a batch and its gradient with respect to the logits.
pub fn cac_batch(
    logits: &Matrix,
    labels: &[usize],
    anchors: &[Vec<f64>],
    lambda: f64,
) -> (f64, Matrix) {
    let b = logits.nrows() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    for (i, row) in logits.outer_iter().enumerate() {
        let (l, g) = cac_loss(
            row.as_slice().expect("contiguous"),
            labels[i],
            anchors,
            lambda,
        );
        total += l.total;
        for (k, v) in g.into_iter().enumerate() {
            grad[[i, k]] = v / b;
        }
    }
    (total / b, grad)
}

pub fn scaled_one_hot(n: usize, magnitude: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|j| {
            (0..n)
                .map(|k| if j == k { magnitude } else { 0.0 })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Outcome {
    Known(u32),
    Unknown,
}

impl Outcome {
    pub fn class(self) -> Option<u32> {
        match self {
            Outcome::Known(c) => Some(c),
            Outcome::Unknown => None,
        }
    }
}

impl Serialize for Outcome {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Outcome::Known(c) => s.serialize_u32(*c),
            Outcome::Unknown => s.serialize_str("UNKNOWN"),
        }
    }
}

impl<'de> Deserialize<'de> for Outcome {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(u32),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(c) => Ok(Outcome::Known(c)),
            Raw::Tag(t) if t == "UNKNOWN" => Ok(Outcome::Unknown),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("bad outcome {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub job_id: String,
    pub outcome: Outcome,
    pub min_distance: f64,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub config: ClassifierConfig,
    pub network: Network,
    /// Catalog class id for each logit index.
    pub class_ids: Vec<u32>,
    pub anchors: Vec<Vec<f64>>,
    pub centers: Vec<Vec<f64>>,
    pub threshold: f64,
    /// 95th percentile of training-sample minimum center distances.
    pub train_distance_p95: f64,
    pub input_means: Vec<f64>,
    pub input_stds: Vec<f64>,
    pub fingerprint: String,
    #[serde(default)]
    pub model_version: u32,
    #[serde(default)]
    pub catalog_digest: Option<String>,
}

impl ClassifierModel {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    fn standardize(&self, latents: &[Vec<f64>]) -> Result<Matrix> {
        standardize_with(latents, &self.input_means, &self.input_stds)
    }

    pub fn logits(&self, latents: &[Vec<f64>]) -> Result<Matrix> {
        self.network.infer(&self.standardize(latents)?)
    }

    /// Distances from each latent's logits to every class center.
    pub fn center_distances(&self, latents: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(latents)?;
        Ok(logits
            .outer_iter()
            .map(|row| {
                let r = row.to_vec();
                self.centers.iter().map(|c| euclidean(&r, c)).collect()
            })
            .collect())
    }

    pub fn decide(&self, distances: &[f64], tau: f64) -> (Outcome, f64) {
        let (best, min) = argmin(distances);
        if min > tau {
            (Outcome::Unknown, min)
        } else {
            (Outcome::Known(self.class_ids[best]), min)
        }
    }

    pub fn predict(&self, job_id: &str, latent: &[f64], tau: f64) -> Result<Prediction> {
        Ok(self
            .predict_many(&[job_id.to_string()], &[latent.to_vec()], tau)?
            .remove(0))
    }

    pub fn predict_many(
        &self,
        job_ids: &[String],
        latents: &[Vec<f64>],
        tau: f64,
    ) -> Result<Vec<Prediction>> {
        let dists = self.center_distances(latents)?;
        Ok(job_ids
            .iter()
            .zip(dists)
            .map(|(id, distances)| {
                let (outcome, min_distance) = self.decide(&distances, tau);
                Prediction {
                    job_id: id.clone(),
                    outcome,
                    min_distance,
                    distances,
                }
            })
            .collect())
    }

    /// Closed-set prediction (τ = ∞).
    pub fn predict_closed(&self, latents: &[Vec<f64>]) -> Result<Vec<u32>> {
        Ok(self
            .center_distances(latents)?
            .iter()
            .map(|d| self.class_ids[argmin(d).0])
            .collect())
    }
}

fn argmin(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &x) in xs.iter().enumerate() {
        if x < best.1 {
            best = (i, x);
        }
    }
    best
}

fn standardize_with(rows: &[Vec<f64>], means: &[f64], stds: &[f64]) -> Result<Matrix> {
    if let Some(r) = rows.iter().find(|r| r.len() != means.len()) {
        return Err(Error::Dimension {
            expected: means.len(),
            got: r.len(),
        });
    }
    let mut m = to_matrix(rows);
    if rows.is_empty() {
        return Ok(Array2::zeros((0, means.len())));
    }
    for mut row in m.outer_iter_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = if stds[k] > 0.0 {
                (*v - means[k]) / stds[k]
            } else {
                0.0
            };
        }
    }
    Ok(m)
}

/// Percentile by linear interpolation between closest ranks.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Per-class shuffled split; each class keeps at least one sample on each
/// side when it has two or more.
pub fn stratified_split<L: Ord + Copy>(
    labels: &[L],
    train_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut k = (n as f64 * train_fraction).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        } else {
            k = n;
        }
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Trains the classifier on `(latent, class id)` pairs. Class ids need not
/// be dense; logit index `i` corresponds to the `i`-th smallest id.
pub fn train_closed(
    latents: &[Vec<f64>],
    labels: &[u32],
    cfg: &ClassifierConfig,
) -> Result<ClassifierModel> {
    cfg.validate()?;
    if latents.len() != labels.len() {
        return Err(Error::data("latents and labels differ in length"));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::data(format!(
            "need >= 2 classes, got {}",
            counts.len()
        )));
    }
    if let Some((c, n)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::data(format!(
            "class {c} has {n} sample(s); need >= 2"
        )));
    }
    let class_ids: Vec<u32> = counts.keys().copied().collect();
    let index: BTreeMap<u32, usize> = class_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let y: Vec<usize> = labels.iter().map(|l| index[l]).collect();
    let n_classes = class_ids.len();
    let dim = latents[0].len();
    if dim != cfg.input_dim {
        return Err(Error::Dimension {
            expected: cfg.input_dim,
            got: dim,
        });
    }

    let count = latents.len() as f64;
    let means: Vec<f64> = (0..dim)
        .map(|k| latents.iter().map(|r| r[k]).sum::<f64>() / count)
        .collect();
    let stds: Vec<f64> = (0..dim)
        .map(|k| {
            (latents
                .iter()
                .map(|r| (r[k] - means[k]).powi(2))
                .sum::<f64>()
                / count)
                .sqrt()
        })
        .collect();
    let x = standardize_with(latents, &means, &stds)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dims = vec![dim];
    dims.extend(&cfg.hidden);
    dims.push(n_classes);
    let mut net = Network::mlp(&dims, false, &mut rng);
    let anchors = scaled_one_hot(n_classes, cfg.anchor_magnitude);
    let mut opt = RmsProp::new(cfg.lr, cfg.rho, 1e-8);
    let mut order: Vec<usize> = (0..latents.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            net.zero_grad();
            let logits = net.forward(&xb, Mode::Train)?;
            let (loss, grad) = cac_batch(&logits, &yb, &anchors, cfg.lambda);
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite CAC loss at epoch {epoch}"
                )));
            }
            epoch_loss += loss * chunk.len() as f64;
            net.backward(&grad)?;
            opt.step(&mut net);
        }
        log::debug!("classifier epoch {epoch}: loss {}", epoch_loss / count);
    }
    net.clear_cache();

    let logits = net.infer(&x)?;
    let mut centers = vec![vec![0.0; n_classes]; n_classes];
    let mut per_class = vec![0usize; n_classes];
    for (row, &c) in logits.outer_iter().zip(&y) {
        per_class[c] += 1;
        for (s, v) in centers[c].iter_mut().zip(row.iter()) {
            *s += v;
        }
    }
    for (c, n) in centers.iter_mut().zip(&per_class) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let min_d: Vec<f64> = logits
        .outer_iter()
        .map(|row| {
            let r = row.to_vec();
            centers
                .iter()
                .map(|c| euclidean(&r, c))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let p95 = percentile(&min_d, 0.95);
    let fingerprint = net.fingerprint();
    Ok(ClassifierModel {
        config: cfg.clone(),
        network: net,
        class_ids,
        anchors,
        centers,
        threshold: p95,
        train_distance_p95: p95,
        input_means: means,
        input_stds: stds,
        fingerprint,
        model_version: 1,
        catalog_digest: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub normalized_tau: f64,
    pub known_accuracy: f64,
    pub unknown_rejection: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub best_tau: f64,
    pub best_accuracy: f64,
    pub tau_max: f64,
}

impl SweepResult {
    pub fn accuracy_at_zero(&self) -> f64 {
        self.points[0].accuracy
    }

    pub fn accuracy_at_max(&self) -> f64 {
        self.points.last().expect("non-empty").accuracy
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "tau",
            "normalized_tau",
            "known_accuracy",
            "unknown_rejection",
            "accuracy",
        ])?;
        for p in &self.points {
            w.write_record([
                p.tau.to_string(),
                p.normalized_tau.to_string(),
                p.known_accuracy.to_string(),
                p.unknown_rejection.to_string(),
                p.accuracy.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sweeps τ uniformly over `[0, 3·p95]` and picks the most accurate value
/// (ties to the smallest τ).
pub fn sweep_threshold(
    model: &ClassifierModel,
    known: &[(Vec<f64>, u32)],
    unknown: &[Vec<f64>],
    grid_size: usize,
) -> Result<SweepResult> {
    if known.is_empty() || unknown.is_empty() {
        return Err(Error::data(
            "threshold sweep needs non-empty known and unknown sets",
        ));
    }
    if grid_size < 2 {
        return Err(Error::config("grid_size must be >= 2"));
    }
    let known_lat: Vec<Vec<f64>> = known.iter().map(|(l, _)| l.clone()).collect();
    let kd = model.center_distances(&known_lat)?;
    let ud = model.center_distances(unknown)?;
    let known_best: Vec<(u32, f64)> = kd
        .iter()
        .map(|d| {
            let (i, m) = argmin(d);
            (model.class_ids[i], m)
        })
        .collect();
    let unknown_min: Vec<f64> = ud.iter().map(|d| argmin(d).1).collect();
    let tau_max = 3.0 * model.train_distance_p95;

    let mut points = Vec::with_capacity(grid_size);
    for g in 0..grid_size {
        let tau = tau_max * g as f64 / (grid_size - 1) as f64;
        let correct = known
            .iter()
            .zip(&known_best)
            .filter(|((_, truth), (pred, d))| *d <= tau && pred == truth)
            .count();
        let rejected = unknown_min.iter().filter(|d| **d > tau).count();
        let ka = correct as f64 / known.len() as f64;
        let ur = rejected as f64 / unknown.len() as f64;
        points.push(SweepPoint {
            tau,
            normalized_tau: if tau_max > 0.0 { tau / tau_max } else { 0.0 },
            known_accuracy: ka,
            unknown_rejection: ur,
            accuracy: 0.5 * ka + 0.5 * ur,
        });
    }
    let best = points.iter().fold(
        &points[0],
        |b, p| if p.accuracy > b.accuracy { p } else { b },
    );
    Ok(SweepResult {
        best_tau: best.tau,
        best_accuracy: best.accuracy,
        points,
        tau_max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Known samples, τ = ∞.
    pub closed_acc: Option<f64>,
    /// Balanced known accuracy / unknown rejection at τ; `None` unless both
    /// known and unknown samples are present.
    pub open_acc: Option<f64>,
    pub known_acc_at_tau: Option<f64>,
    pub unknown_rejection: Option<f64>,
    /// Row and column labels: known class ids followed by `None` (unknown).
    pub labels: Vec<Option<u32>>,
    /// Row-normalized open-set confusion matrix at τ.
    pub confusion: Vec<Vec<f64>>,
}

/// Evaluates on `(latent, true class or None for unknown)` samples.
pub fn evaluate(
    model: &ClassifierModel,
    tau: f64,
    test: &[(Vec<f64>, Option<u32>)],
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::data("empty test set"));
    }
    let lat: Vec<Vec<f64>> = test.iter().map(|(l, _)| l.clone()).collect();
    let dists = model.center_distances(&lat)?;
    let mut labels: Vec<Option<u32>> = model.class_ids.iter().map(|&c| Some(c)).collect();
    labels.push(None);
    let pos: BTreeMap<Option<u32>, usize> =
        labels.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let mut counts = vec![vec![0usize; labels.len()]; labels.len()];

    let (mut known_n, mut closed_ok, mut open_ok, mut unk_n, mut unk_rej) = (0, 0, 0, 0, 0);
    for ((_, truth), d) in test.iter().zip(&dists) {
        let (best, _) = argmin(d);
        let (outcome, _) = model.decide(d, tau);
        let truth = truth.filter(|c| model.class_ids.contains(c));
        match truth {
            Some(c) => {
                known_n += 1;
                closed_ok += usize::from(model.class_ids[best] == c);
                open_ok += usize::from(outcome == Outcome::Known(c));
            }
            None => {
                unk_n += 1;
                unk_rej += usize::from(outcome == Outcome::Unknown);
            }
        }
        counts[pos[&truth]][pos[&outcome.class()]] += 1;
    }
    let frac = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let known_acc = frac(open_ok, known_n);
    let rejection = frac(unk_rej, unk_n);
    let confusion = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| {
                    if total > 0 {
                        c as f64 / total as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(Metrics {
        closed_acc: frac(closed_ok, known_n),
        open_acc: known_acc.zip(rejection).map(|(k, u)| 0.5 * k + 0.5 * u),
        known_acc_at_tau: known_acc,
        unknown_rejection: rejection,
        labels,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::grad_check_with;
    use proptest::prelude::*;
    use rand::Rng;

    fn blobs(per: usize, centers: &[[f64; 2]], seed: u64) -> (Vec<Vec<f64>>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (c, mu) in centers.iter().enumerate() {
            for _ in 0..per {
                x.push(vec![
                    mu[0] + rng.random_range(-0.5..0.5),
                    mu[1] + rng.random_range(-0.5..0.5),
                ]);
                y.push(c as u32 * 10);
            }
        }
        (x, y)
    }

    fn cfg2() -> ClassifierConfig {
        ClassifierConfig {
            input_dim: 2,
            hidden: vec![16],
            epochs: 40,
            batch_size: 16,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn loss_at_anchor() {
        let anchors = scaled_one_hot(2, 10.0);
        let (l, _) = cac_loss(&anchors[1], 1, &anchors, 0.1);
        assert_eq!(l.anchor, 0.0);
        let expected = (1.0 + (-(200f64.sqrt())).exp()).ln();
        assert!((l.tuplet - expected).abs() < 1e-18);
        assert!((l.tuplet - 7.2e-7).abs() < 1e-8);
    }

    #[test]
    fn loss_equidistant_is_ln2() {
        let anchors = scaled_one_hot(2, 10.0);
        let (l, _) = cac_loss(&[5.0, 5.0], 0, &anchors, 0.0);
        assert!((l.tuplet - 2f64.ln()).abs() < 1e-15);
        assert_eq!(l.total, l.tuplet);
        let (with, _) = cac_loss(&[5.0, 5.0], 0, &anchors, 0.5);
        assert!((with.total - (l.tuplet + 0.5 * with.anchor)).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let anchors = scaled_one_hot(4, 10.0);
        let f = vec![1.0, -2.0, 3.5, 0.7];
        let (_, g) = cac_loss(&f, 2, &anchors, 0.3);
        for k in 0..4 {
            let mut up = f.clone();
            up[k] += 1e-6;
            let mut dn = f.clone();
            dn[k] -= 1e-6;
            let num = (cac_loss(&up, 2, &anchors, 0.3).0.total
                - cac_loss(&dn, 2, &anchors, 0.3).0.total)
                / 2e-6;
            assert!((num - g[k]).abs() < 1e-7, "{k}: {num} vs {}", g[k]);
        }
    }

    #[test]
    fn classifier_network_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::mlp(&[10, 64, 64, 5], false, &mut rng);
        let x = Array2::from_shape_fn((8, 10), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..8).map(|i| i % 5).collect();
        let anchors = scaled_one_hot(5, 10.0);
        let r = grad_check_with(&mut net, &x, 1000, 2, |y| {
            cac_batch(y, &labels, &anchors, 0.1)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn separable_classes_and_center_mean() {
        let (x, y) = blobs(60, &[[0.0, 0.0], [6.0, 6.0]], 1);
        let (tr, te) = stratified_split(&y, 0.8, 0);
        let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<u32>) {
            (
                idx.iter().map(|&i| x[i].clone()).collect(),
                idx.iter().map(|&i| y[i]).collect(),
            )
        };
        let (xtr, ytr) = pick(&tr);
        let (xte, yte) = pick(&te);
        let m = train_closed(&xtr, &ytr, &cfg2()).unwrap();
        assert_eq!(m.class_ids, vec![0, 10]);
        let pred = m.predict_closed(&xte).unwrap();
        let acc = pred.iter().zip(&yte).filter(|(a, b)| a == b).count() as f64 / yte.len() as f64;
        assert!(acc >= 0.99, "{acc}");

        // each center is the mean of its class's training logits
        let logits = m.logits(&xtr).unwrap();
        for (k, &cid) in m.class_ids.iter().enumerate() {
            let rows: Vec<_> = logits
                .outer_iter()
                .zip(&ytr)
                .filter(|(_, c)| **c == cid)
                .map(|(r, _)| r.to_vec())
                .collect();
            for d in 0..2 {
                let lo = rows.iter().map(|r| r[d]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r[d]).fold(f64::NEG_INFINITY, f64::max);
                assert!(m.centers[k][d] >= lo - 1e-12 && m.centers[k][d] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_model_json() {
        let (x, y) = blobs(20, &[[0.0, 0.0], [6.0, 6.0]], 1);
        let a = serde_json::to_string(&train_closed(&x, &y, &cfg2()).unwrap()).unwrap();
        let b = serde_json::to_string(&train_closed(&x, &y, &cfg2()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_tiny_classes() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        assert!(train_closed(&x, &[0, 0, 1], &cfg2()).is_err());
        assert!(train_closed(&x, &[0, 0, 0], &cfg2()).is_err());
    }

    #[test]
    fn prediction_rules() {
        let (x, y) = blobs(20, &[[0.0, 0.0], [6.0, 6.0], [0.0, 6.0], [6.0, 0.0]], 2);
        let mut m = train_closed(&x, &y, &cfg2()).unwrap();
        // move center 3 onto the logits of a chosen latent
        let probe = vec![2.0, 3.0];
        m.centers[3] = m.logits(&[probe.clone()]).unwrap().row(0).to_vec();
        let p = m.predict("p", &probe, 0.0).unwrap();
        assert_eq!(p.outcome, Outcome::Known(30));
        assert_eq!(p.min_distance, 0.0);
        let other = m.predict("q", &[9.0, -3.0], 0.0).unwrap();
        assert_eq!(other.outcome, Outcome::Unknown);
        let inf = m.predict("q", &[90.0, -30.0], f64::INFINITY).unwrap();
        assert_ne!(inf.outcome, Outcome::Unknown);
        // tie: equal distances resolve to the lowest logit index
        assert_eq!(m.decide(&[1.0, 1.0, 2.0, 3.0], 5.0).0, Outcome::Known(0));
    }

    #[test]
    fn outcome_serialization() {
        let p = Prediction {
            job_id: "j".into(),
            outcome: Outcome::Unknown,
            min_distance: 1.5,
            distances: vec![1.5, 2.0],
        };
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(
            s,
            r#"{"job_id":"j","outcome":"UNKNOWN","min_distance":1.5,"distances":[1.5,2.0]}"#
        );
        assert_eq!(serde_json::from_str::<Prediction>(&s).unwrap(), p);
        let k: Outcome = serde_json::from_str("7").unwrap();
        assert_eq!(k, Outcome::Known(7));
    }

    #[test]
    fn sweep_endpoints() {
        let (x, y) = blobs(30, &[[0.0, 0.0], [6.0, 6.0]], 4);
        let m = train_closed(&x, &y, &cfg2()).unwrap();
        let known: Vec<(Vec<f64>, u32)> = x.iter().cloned().zip(y.iter().copied()).collect();
        let unknown = vec![vec![30.0, -30.0], vec![-25.0, 40.0]];
        let s = sweep_threshold(&m, &known, &unknown, 50).unwrap();
        assert_eq!(s.points.len(), 50);
        assert_eq!(s.points[0].tau, 0.0);
        assert_eq!(s.accuracy_at_zero(), 0.5);
        assert!((s.tau_max - 3.0 * m.train_distance_p95).abs() < 1e-12);
        assert!(s.best_accuracy >= s.accuracy_at_zero());
        assert!(sweep_threshold(&m, &known, &[], 50).is_err());
        let mut csv = Vec::new();
        s.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .starts_with("tau,normalized_tau"));
    }

    #[test]
    fn evaluate_perfect_and_recount() {
        let (x, y) = blobs(30, &[[0.0, 0.0], [6.0, 6.0]], 5);
        let m = train_closed(&x, &y, &cfg2()).unwrap();
        let mut test: Vec<(Vec<f64>, Option<u32>)> =
            x.iter().cloned().zip(y.iter().map(|&c| Some(c))).collect();
        let metrics = evaluate(&m, f64::INFINITY, &test).unwrap();
        assert_eq!(metrics.closed_acc, Some(1.0));
        assert_eq!(metrics.open_acc, None);
        assert_eq!(metrics.confusion[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(metrics.confusion[1], vec![0.0, 1.0, 0.0]);
        assert_eq!(metrics.confusion[2], vec![0.0, 0.0, 0.0]);

        test.push((vec![40.0, -40.0], None));
        let tau = m.train_distance_p95;
        let metrics = evaluate(&m, tau, &test).unwrap();
        // recount from raw predictions
        let preds: Vec<Prediction> = test
            .iter()
            .map(|(l, _)| m.predict("t", l, tau).unwrap())
            .collect();
        let known: Vec<_> = test
            .iter()
            .zip(&preds)
            .filter(|((_, t), _)| t.is_some())
            .collect();
        let ka = known
            .iter()
            .filter(|((_, t), p)| p.outcome.class() == *t)
            .count() as f64
            / known.len() as f64;
        let ur = if preds.last().unwrap().outcome == Outcome::Unknown {
            1.0
        } else {
            0.0
        };
        assert_eq!(metrics.open_acc, Some(0.5 * ka + 0.5 * ur));
        for row in &metrics.confusion {
            let s: f64 = row.iter().sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_stratified() {
        let labels: Vec<u32> = (0..50).map(|i| (i % 5) as u32).collect();
        let (tr, te) = stratified_split(&labels, 0.8, 1);
        assert_eq!(tr.len(), 40);
        assert_eq!(te.len(), 10);
        for c in 0..5 {
            assert_eq!(te.iter().filter(|&&i| labels[i] == c).count(), 2);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn loss_terms_positive(f in prop::collection::vec(-50.0f64..50.0, 3), y in 0usize..3, lambda in 0.0f64..2.0) {
            let anchors = scaled_one_hot(3, 10.0);
            let (l, g) = cac_loss(&f, y, &anchors, lambda);
            prop_assert!(l.tuplet > 0.0 && l.tuplet.is_finite());
            prop_assert!(l.anchor >= 0.0 && l.anchor.is_finite());
            prop_assert!(g.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn unknown_set_shrinks_with_tau(d in prop::collection::vec(prop::collection::vec(0.0f64..20.0, 3), 1..20), t1 in 0.0f64..20.0, dt in 0.0f64..10.0) {
            let model = toy_model();
            let unk = |tau: f64| d.iter().filter(|r| model.decide(r, tau).0 == Outcome::Unknown).count();
            prop_assert!(unk(t1 + dt) <= unk(t1));
        }

        #[test]
        fn relabeling_invariance(d in prop::collection::vec(0.0f64..20.0, 3), tau in 0.0f64..20.0) {
            let model = toy_model();
            let mut permuted = toy_model();
            // swap logit slots 0 and 2 consistently
            permuted.class_ids = vec![model.class_ids[2], model.class_ids[1], model.class_ids[0]];
            let pd = vec![d[2], d[1], d[0]];
            let a = model.decide(&d, tau).0;
            let b = permuted.decide(&pd, tau).0;
            // ties resolve by slot, so only compare when the minimum is unique
            let min = d.iter().copied().fold(f64::INFINITY, f64::min);
            if d.iter().filter(|v| **v == min).count() == 1 {
                prop_assert_eq!(a, b);
            }
        }
    }

    fn toy_model() -> ClassifierModel {
        let (x, y) = blobs(5, &[[0.0, 0.0], [6.0, 6.0], [0.0, 6.0]], 9);
        let cfg = ClassifierConfig {
            epochs: 1,
            ..cfg2()
        };
        train_closed(&x, &y, &cfg).unwrap()
    }
}
