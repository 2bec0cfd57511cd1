//! Encoder / generator / two-critic ensemble trained with weight-clipped
//! Wasserstein objectives plus an L2 reconstruction term. The encoder is
//! the deliverable: it maps a standardized 186-feature vector to a 10-d
//! latent vector.
//!
//! Per outer step:
//!
//! * `n_critic` critic updates. The data critic maximizes
//!   `mean C1(x) − mean C1(G(z))` with `z ~ N(0, I)`; the latent critic
//!   maximizes `mean C2(z) − mean C2(E(x))`. Both are clipped to `[−c, c]`.
//! * one encoder+generator update minimizing
//!   `−mean C1(G(z)) − mean C2(E(x)) + α·mean ‖x − G(E(x))‖²`.
//!
//! The saturating binary cross-entropy objective bounded in `[0, 1]` is
//! the motivation for using the Wasserstein form and is not implemented.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, Scaler, NUM_FEATURES};
use crate::neural::{to_matrix, Matrix, Mode, Network, RmsProp};

pub const LATENT_DIM: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub generator_hidden: usize,
    pub critic_hidden: Vec<usize>,
    pub n_critic: usize,
    pub clip: f64,
    /// Reconstruction weight α.
    pub alpha: f64,
    /// Multiplier on both adversarial terms of the encoder/generator loss.
    /// 0 turns the model into a plain autoencoder; used for debugging.
    pub adversarial_weight: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub rho: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            input_dim: NUM_FEATURES,
            latent_dim: LATENT_DIM,
            encoder_hidden: 40,
            generator_hidden: 128,
            critic_hidden: vec![100, 10],
            n_critic: 5,
            clip: 0.01,
            alpha: 10.0,
            adversarial_weight: 1.0,
            batch_size: 64,
            epochs: 200,
            lr: 5e-5,
            rho: 0.9,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.latent_dim >= self.input_dim {
            return Err(Error::config("latent_dim must be in 1..input_dim"));
        }
        if self.n_critic == 0 {
            return Err(Error::config("n_critic must be >= 1"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::config("clip must be > 0"));
        }
        if !(self.alpha >= 0.0) || !(self.adversarial_weight >= 0.0) {
            return Err(Error::config("loss weights must be >= 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be >= 2"));
        }
        if !(self.lr > 0.0) || !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("lr must be > 0 and rho in (0,1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of `C1(x) − C1(G(z))` over the epoch's critic updates.
    pub wasserstein_x: f64,
    /// Mean of `C2(z) − C2(E(x))` over the epoch's critic updates.
    pub wasserstein_z: f64,
    /// Mean per-element squared reconstruction error on training batches.
    pub reconstruction_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub initial_mse: f64,
    pub final_mse: f64,
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanModel {
    pub config: GanConfig,
    pub encoder: Network,
    pub generator: Network,
    pub critic_x: Network,
    pub critic_z: Network,
    #[serde(default)]
    pub scaler: Option<Scaler>,
    #[serde(default)]
    pub scaler_id: Option<String>,
    pub log: TrainingLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub job_id: String,
    pub values: Vec<f64>,
}

impl GanModel {
    pub fn new(cfg: GanConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Network::mlp(
            &[cfg.input_dim, cfg.encoder_hidden, cfg.latent_dim],
            true,
            rng,
        );
        let generator = Network::mlp(
            &[cfg.latent_dim, cfg.generator_hidden, cfg.input_dim],
            true,
            rng,
        );
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.critic_hidden);
        dims.push(1);
        let mut critic_x = Network::mlp(&dims, false, rng);
        let mut critic_z = Network::mlp(&[cfg.latent_dim, 1], false, rng);
        critic_x.clip_weights(cfg.clip);
        critic_z.clip_weights(cfg.clip);
        Ok(Self {
            config: cfg,
            encoder,
            generator,
            critic_x,
            critic_z,
            scaler: None,
            scaler_id: None,
            log: TrainingLog::default(),
        })
    }

    /// Latent vectors for standardized rows (inference mode).
    pub fn encode_matrix(&self, x: &Matrix) -> Result<Matrix> {
        self.encoder.infer(x)
    }

    pub fn encode(&self, standardized: &[f64]) -> Result<Vec<f64>> {
        if standardized.len() != self.config.input_dim {
            return Err(Error::Dimension {
                expected: self.config.input_dim,
                got: standardized.len(),
            });
        }
        Ok(self
            .encode_matrix(&to_matrix(&[standardized.to_vec()]))?
            .row(0)
            .to_vec())
    }

    /// Applies the embedded scaler (if any) and encodes.
    pub fn embed_raw(&self, raw: &[f64]) -> Result<Vec<f64>> {
        match &self.scaler {
            Some(s) => self.encode(&s.apply(raw)?),
            None => self.encode(raw),
        }
    }

    /// `G(E(x))` for standardized rows.
    pub fn reconstruct(&self, x: &Matrix) -> Result<Matrix> {
        self.generator.infer(&self.encoder.infer(x)?)
    }

    /// Batch version of [`GanModel::embed_raw`].
    pub fn embed_features(&self, features: &[FeatureVector]) -> Result<Vec<LatentVector>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Vec<f64>> = features.iter().map(|f| f.values.clone()).collect();
        let rows = match &self.scaler {
            Some(s) => s.apply_all(&rows)?,
            None => rows,
        };
        if let Some(r) = rows.iter().find(|r| r.len() != self.config.input_dim) {
            return Err(Error::Dimension {
                expected: self.config.input_dim,
                got: r.len(),
            });
        }
        let z = self.encode_matrix(&to_matrix(&rows))?;
        Ok(features
            .iter()
            .zip(z.outer_iter())
            .map(|(f, row)| LatentVector {
                job_id: f.job_id.clone(),
                values: row.to_vec(),
            })
            .collect())
    }

    pub fn reconstruction_mse(&self, x: &Matrix) -> Result<f64> {
        let r = self.reconstruct(x)?;
        Ok((&r - x).mapv(|v| v * v).mean().unwrap_or(0.0))
    }
}

fn sample_prior(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Matrix {
    Array2::from_shape_fn((rows, dim), |_| StandardNormal.sample(rng))
}

fn constant(rows: usize, v: f64) -> Matrix {
    Array2::from_elem((rows, 1), v)
}

/// Stateful trainer; exposes the two update phases separately.
pub struct GanTrainer {
    pub model: GanModel,
    rng: ChaCha8Rng,
    opt_e: RmsProp,
    opt_g: RmsProp,
    opt_cx: RmsProp,
    opt_cz: RmsProp,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CriticStats {
    pub wasserstein_x: f64,
    pub wasserstein_z: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GeneratorStats {
    pub adversarial: f64,
    pub reconstruction_mse: f64,
    pub loss: f64,
}

impl GanTrainer {
    pub fn new(cfg: GanConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = GanModel::new(cfg.clone(), &mut rng)?;
        let opt = || RmsProp::new(cfg.lr, cfg.rho, 1e-8);
        Ok(Self {
            model,
            rng,
            opt_e: opt(),
            opt_g: opt(),
            opt_cx: opt(),
            opt_cz: opt(),
        })
    }

    /// One update of both critics on real batch `x`, followed by clipping.
    pub fn critic_step(&mut self, x: &Matrix) -> Result<CriticStats> {
        let b = x.nrows();
        let (latent_dim, clip) = (self.model.config.latent_dim, self.model.config.clip);
        let m = &mut self.model;

        let z = sample_prior(&mut self.rng, b, latent_dim);
        let fake = m.generator.forward(&z, Mode::BatchStats)?;
        m.critic_x.zero_grad();
        let real_score = m.critic_x.forward(x, Mode::Train)?;
        m.critic_x.backward(&constant(b, -1.0 / b as f64))?;
        let fake_score = m.critic_x.forward(&fake, Mode::Train)?;
        m.critic_x.backward(&constant(b, 1.0 / b as f64))?;
        self.opt_cx.step(&mut m.critic_x);
        m.critic_x.clip_weights(clip);

        let z = sample_prior(&mut self.rng, b, latent_dim);
        let enc = m.encoder.forward(x, Mode::BatchStats)?;
        m.critic_z.zero_grad();
        let prior_score = m.critic_z.forward(&z, Mode::Train)?;
        m.critic_z.backward(&constant(b, -1.0 / b as f64))?;
        let enc_score = m.critic_z.forward(&enc, Mode::Train)?;
        m.critic_z.backward(&constant(b, 1.0 / b as f64))?;
        self.opt_cz.step(&mut m.critic_z);
        m.critic_z.clip_weights(clip);

        m.generator.clear_cache();
        m.encoder.clear_cache();
        Ok(CriticStats {
            wasserstein_x: real_score.mean().unwrap() - fake_score.mean().unwrap(),
            wasserstein_z: prior_score.mean().unwrap() - enc_score.mean().unwrap(),
        })
    }

    /// One joint encoder+generator update on real batch `x`.
    pub fn generator_step(&mut self, x: &Matrix) -> Result<GeneratorStats> {
        let b = x.nrows() as f64;
        let cfg = self.model.config.clone();
        let w = cfg.adversarial_weight;
        let m = &mut self.model;
        m.encoder.zero_grad();
        m.generator.zero_grad();

        // −mean C1(G(z))
        let z = sample_prior(&mut self.rng, x.nrows(), cfg.latent_dim);
        let fake = m.generator.forward(&z, Mode::Train)?;
        let fake_score = m.critic_x.forward(&fake, Mode::BatchStats)?;
        let d_fake = m.critic_x.backward(&constant(x.nrows(), -w / b))?;
        m.generator.backward(&d_fake)?;

        // −mean C2(E(x)) + α·mean ‖x − G(E(x))‖²
        let enc = m.encoder.forward(x, Mode::Train)?;
        let enc_score = m.critic_z.forward(&enc, Mode::BatchStats)?;
        let d_enc_adv = m.critic_z.backward(&constant(x.nrows(), -w / b))?;
        let recon = m.generator.forward(&enc, Mode::Train)?;
        let diff = &recon - x;
        let d_recon = &diff * (2.0 * cfg.alpha / b);
        let d_enc_rec = m.generator.backward(&d_recon)?;
        m.encoder.backward(&(d_enc_adv + d_enc_rec))?;

        self.opt_e.step(&mut m.encoder);
        self.opt_g.step(&mut m.generator);
        m.critic_x.clear_cache();
        m.critic_z.clear_cache();

        let sq = diff.mapv(|v| v * v);
        let adversarial = -fake_score.mean().unwrap() - enc_score.mean().unwrap();
        let per_row = sq.sum_axis(Axis(1)).mean().unwrap();
        Ok(GeneratorStats {
            adversarial,
            reconstruction_mse: sq.mean().unwrap(),
            loss: w * adversarial + cfg.alpha * per_row,
        })
    }

    pub fn train(mut self, x: &Matrix) -> Result<GanModel> {
        let cfg = self.model.config.clone();
        if x.ncols() != cfg.input_dim {
            return Err(Error::Dimension {
                expected: cfg.input_dim,
                got: x.ncols(),
            });
        }
        if x.nrows() < cfg.batch_size.max(2) {
            return Err(Error::data(format!(
                "{} training rows is fewer than one batch of {}",
                x.nrows(),
                cfg.batch_size
            )));
        }
        if x.nrows() < 10 * cfg.batch_size {
            log::warn!(
                "GAN training on {} rows (< 10 x batch size {})",
                x.nrows(),
                cfg.batch_size
            );
        }
        self.model.log.initial_mse = self.model.reconstruction_mse(x)?;
        let mut order: Vec<usize> = (0..x.nrows()).collect();

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut self.rng);
            let (mut wx, mut wz, mut mse, mut nc, mut ng) = (0.0, 0.0, 0.0, 0usize, 0usize);
            for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
                if chunk.len() < 2 {
                    continue;
                }
                let batch = x.select(Axis(0), chunk);
                for _ in 0..cfg.n_critic {
                    let s = self.critic_step(&batch)?;
                    wx += s.wasserstein_x;
                    wz += s.wasserstein_z;
                    nc += 1;
                }
                let g = self.generator_step(&batch)?;
                mse += g.reconstruction_mse;
                ng += 1;
                if !(wx.is_finite() && wz.is_finite() && g.loss.is_finite()) {
                    return Err(Error::numeric(format!(
                        "non-finite GAN loss at epoch {epoch} step {step}: \
                         wasserstein_x={wx} wasserstein_z={wz} generator_loss={} recon_mse={}",
                        g.loss, g.reconstruction_mse
                    )));
                }
            }
            let entry = EpochLog {
                epoch,
                wasserstein_x: wx / nc.max(1) as f64,
                wasserstein_z: wz / nc.max(1) as f64,
                reconstruction_mse: mse / ng.max(1) as f64,
            };
            log::debug!("gan epoch {epoch}: {entry:?}");
            self.model.log.epochs.push(entry);
        }
        if !(self.model.encoder.all_finite() && self.model.generator.all_finite()) {
            return Err(Error::numeric("non-finite GAN parameters after training"));
        }
        self.model.log.final_mse = self.model.reconstruction_mse(x)?;
        Ok(self.model)
    }
}

/// Trains on an already standardized matrix.
pub fn train(standardized: &Matrix, cfg: &GanConfig) -> Result<GanModel> {
    GanTrainer::new(cfg.clone())?.train(standardized)
}

/// Fits a scaler on raw feature rows, trains, and embeds the scaler.
pub fn train_raw(raw: &[Vec<f64>], cfg: &GanConfig) -> Result<GanModel> {
    let scaler = Scaler::fit(raw)?;
    let x = to_matrix(&scaler.apply_all(raw)?);
    let mut model = train(&x, cfg)?;
    model.scaler_id = Some(scaler_digest(&scaler));
    model.scaler = Some(scaler);
    Ok(model)
}

pub fn write_latents_csv<W: std::io::Write>(writer: W, rows: &[LatentVector]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = rows.first().map_or(LATENT_DIM, |r| r.values.len());
    let mut header = vec!["job_id".to_string()];
    header.extend((0..dim).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.job_id.clone()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_latents_csv(path: impl AsRef<std::path::Path>, rows: &[LatentVector]) -> Result<()> {
    let f = std::fs::File::create(path.as_ref())?;
    write_latents_csv(std::io::BufWriter::new(f), rows)
}

pub fn load_latents_csv(path: impl AsRef<std::path::Path>) -> Result<Vec<LatentVector>> {
    let f = std::fs::File::open(path.as_ref())?;
    let width = csv::Reader::from_reader(std::fs::File::open(path.as_ref())?)
        .headers()?
        .len();
    Ok(
        crate::features::read_matrix_csv(f, width.saturating_sub(1))?
            .into_iter()
            .map(|r| LatentVector {
                job_id: r.job_id,
                values: r.values,
            })
            .collect(),
    )
}

pub fn scaler_digest(s: &Scaler) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(s).expect("scaler serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDistribution {
    pub feature: usize,
    pub mean_real: f64,
    pub mean_recon: f64,
    pub std_real: f64,
    pub std_recon: f64,
    pub ks: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Per-feature comparison of real and reconstructed columns.
pub fn distribution_check(real: &Matrix, recon: &Matrix) -> Result<Vec<FeatureDistribution>> {
    if real.ncols() != recon.ncols() {
        return Err(Error::Dimension {
            expected: real.ncols(),
            got: recon.ncols(),
        });
    }
    Ok((0..real.ncols())
        .map(|f| {
            let r = real.column(f).to_vec();
            let g = recon.column(f).to_vec();
            let (mean_real, std_real) = mean_std(&r);
            let (mean_recon, std_recon) = mean_std(&g);
            FeatureDistribution {
                feature: f,
                mean_real,
                mean_recon,
                std_real,
                std_recon,
                ks: ks_statistic(&r, &g),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use rand::Rng;

    fn small_cfg() -> GanConfig {
        GanConfig {
            input_dim: 12,
            latent_dim: 3,
            encoder_hidden: 8,
            generator_hidden: 16,
            critic_hidden: vec![10, 4],
            batch_size: 16,
            epochs: 3,
            seed: 5,
            ..Default::default()
        }
    }

    fn data(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn shapes() {
        let cfg = GanConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = GanModel::new(cfg, &mut rng).unwrap();
        for b in [1, 3] {
            let x = Array2::zeros((b, 186));
            let z = m.encode_matrix(&x).unwrap();
            assert_eq!(z.dim(), (b, 10));
            assert_eq!(m.generator.infer(&z).unwrap().dim(), (b, 186));
            assert_eq!(m.critic_x.infer(&x).unwrap().dim(), (b, 1));
            assert_eq!(m.critic_z.infer(&z).unwrap().dim(), (b, 1));
        }
        assert!(m.encode(&[0.0; 5]).is_err());
    }

    #[test]
    fn phases_touch_only_their_networks() {
        let mut t = GanTrainer::new(small_cfg()).unwrap();
        let x = data(16, 12, 1);
        let fp = |t: &mut GanTrainer| {
            (
                t.model.encoder.fingerprint(),
                t.model.generator.fingerprint(),
                t.model.critic_x.fingerprint(),
                t.model.critic_z.fingerprint(),
            )
        };
        let before = fp(&mut t);
        t.critic_step(&x).unwrap();
        let after = fp(&mut t);
        assert_eq!(before.0, after.0);
        assert_eq!(before.1, after.1);
        assert_ne!(before.2, after.2);
        assert_ne!(before.3, after.3);
        t.generator_step(&x).unwrap();
        let last = fp(&mut t);
        assert_ne!(after.0, last.0);
        assert_ne!(after.1, last.1);
        assert_eq!(after.2, last.2);
        assert_eq!(after.3, last.3);
    }

    #[test]
    fn critics_stay_clipped() {
        let mut t = GanTrainer::new(small_cfg()).unwrap();
        let x = data(16, 12, 2);
        for _ in 0..5 {
            t.critic_step(&x).unwrap();
            assert!(t.model.critic_x.max_abs_param() <= 0.01);
            assert!(t.model.critic_z.max_abs_param() <= 0.01);
            t.generator_step(&x).unwrap();
        }
    }

    #[test]
    fn deterministic_training() {
        let x = data(64, 12, 3);
        let mut a = train(&x, &small_cfg()).unwrap();
        let mut b = train(&x, &small_cfg()).unwrap();
        assert_eq!(a.encoder.fingerprint(), b.encoder.fingerprint());
        assert_eq!(a.generator.fingerprint(), b.generator.fingerprint());
        assert_eq!(a.critic_x.fingerprint(), b.critic_x.fingerprint());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn encode_is_deterministic_and_continuous() {
        let x = data(64, 12, 4);
        let m = train(&x, &small_cfg()).unwrap();
        let row = x.row(0).to_vec();
        assert_eq!(m.encode(&row).unwrap(), m.encode(&row).unwrap());
        let mut near = row.clone();
        near[3] += 1e-9;
        let a = m.encode(&row).unwrap();
        let b = m.encode(&near).unwrap();
        let d: f64 = a
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(d < 1e-6);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn too_few_rows_rejected() {
        assert!(train(&data(4, 12, 0), &small_cfg()).is_err());
        assert!(train(&data(40, 11, 0), &small_cfg()).is_err());
    }

    #[test]
    fn ks_extremes() {
        let x = data(50, 3, 9);
        let report = distribution_check(&x, &x).unwrap();
        assert!(report
            .iter()
            .all(|r| r.ks == 0.0 && r.mean_real == r.mean_recon));
        let shifted = x.mapv(|v| v + 10.0);
        let report = distribution_check(&x, &shifted).unwrap();
        assert!(report.iter().all(|r| r.ks == 1.0));
        assert_eq!(ks_statistic(&[1.0, 2.0], &[1.5]), 0.5);
        assert!(distribution_check(&x, &x.slice(s![.., ..2]).to_owned()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = GanConfig::default();
        c.latent_dim = 186;
        assert!(c.validate().is_err());
        let mut c = GanConfig::default();
        c.n_critic = 0;
        assert!(c.validate().is_err());
        let mut c = GanConfig::default();
        c.clip = 0.0;
        assert!(c.validate().is_err());
    }
}
