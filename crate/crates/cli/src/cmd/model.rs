//! train-gan, embed, cluster, label

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, ValueEnum};

use powerprof::cluster::{build_catalog, dbscan, kmeans, CatalogParams, ClassCatalog, ClusterResult};
use powerprof::features::load_feature_csv;
use powerprof::gan::{self, save_latents_csv, GanConfig, GanModel};
use powerprof::ingest;
use powerprof::workflow::pipeline::latent_map;
use powerprof::workflow::{kinds, load_artifact, save_artifact};
use powerprof::{Error, Result};

use crate::common::{latents, Global};

#[derive(Debug, Args)]
pub struct TrainGanArgs {
    /// Feature matrix CSV
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

/// `--config` is a GanConfig.
pub fn train_gan(g: &Global, a: TrainGanArgs) -> Result<()> {
    let out = g.out()?;
    let mut cfg: GanConfig = g.load_config()?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let rows = load_feature_csv(&a.features)?;
    let raw: Vec<Vec<f64>> = rows.iter().map(|r| r.values.clone()).collect();
    let model = gan::train_raw(&raw, &cfg)?;
    let digest = save_artifact(out, kinds::GAN, &model)?;
    println!(
        "trained on {} jobs for {} epochs; reconstruction MSE {:.4} -> {:.4}; sha256 {digest}",
        raw.len(),
        cfg.epochs,
        model.log.initial_mse,
        model.log.final_mse
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// GAN model artifact
    #[arg(long)]
    model: PathBuf,
    /// Feature matrix CSV
    #[arg(long)]
    features: PathBuf,
}

pub fn embed(g: &Global, a: EmbedArgs) -> Result<()> {
    let out = g.out()?;
    let model: GanModel = load_artifact(&a.model, kinds::GAN)?;
    let rows = load_feature_csv(&a.features)?;
    let z = model.embed_features(&rows)?;
    save_latents_csv(out, &z)?;
    println!("{} latent vectors written to {}", z.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Algo {
    Dbscan,
    Kmeans,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Latent CSV (job_id,z0..z9)
    #[arg(long)]
    latents: PathBuf,
    #[arg(long, value_enum, default_value = "dbscan")]
    algo: Algo,
    #[arg(long, default_value_t = 0.8)]
    eps: f64,
    #[arg(long, default_value_t = 10)]
    min_pts: usize,
    /// k-means cluster count
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 300)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

pub fn cluster(g: &Global, a: ClusterArgs) -> Result<()> {
    let out = g.out()?;
    let points = latent_map(&latents(&a.latents)?);
    let result: ClusterResult = match a.algo {
        Algo::Dbscan => {
            if !(a.eps > 0.0) || a.min_pts == 0 {
                return Err(Error::config("dbscan needs --eps > 0 and --min-pts >= 1"));
            }
            dbscan(&points, a.eps, a.min_pts)?
        }
        Algo::Kmeans => {
            let k = a.k.ok_or_else(|| Error::config("kmeans needs --k"))?;
            kmeans(&points, k, g.seed.unwrap_or(0), a.max_iter, a.tol)?
        }
    };
    save_artifact(out, kinds::CLUSTERS, &result)?;
    println!(
        "{} points, {} clusters, {} noise",
        result.labels.len(),
        result.num_clusters(),
        result.noise_count()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Cluster result artifact
    #[arg(long)]
    clusters: PathBuf,
    /// Profiles JSONL
    #[arg(long)]
    profiles: PathBuf,
    /// Feature matrix CSV
    #[arg(long)]
    features: PathBuf,
    /// Latent CSV used to pick medoids; raw features are used without it
    #[arg(long)]
    latents: Option<PathBuf>,
    #[arg(long)]
    min_class_size: Option<usize>,
}

/// `--config` is a CatalogParams.
pub fn label(g: &Global, a: LabelArgs) -> Result<()> {
    let out = g.out()?;
    let mut params: CatalogParams = g.load_config()?;
    if let Some(m) = a.min_class_size {
        params.min_class_size = m;
    }
    let clusters: ClusterResult = load_artifact(&a.clusters, kinds::CLUSTERS)?;
    let profiles = ingest::load_profiles(&a.profiles)?;
    let features = load_feature_csv(&a.features)?;
    let points: BTreeMap<String, Vec<f64>> = match &a.latents {
        Some(p) => latent_map(&latents(p)?),
        None => features.iter().map(|f| (f.job_id.clone(), f.values.clone())).collect(),
    };
    let catalog: ClassCatalog = build_catalog(&clusters, &profiles, &features, &points, &params)?;
    save_artifact(out, kinds::CATALOG, &catalog)?;
    println!("{} classes, {} residual jobs", catalog.classes.len(), catalog.residual.len());
    for c in &catalog.classes {
        println!(
            "  class {:>3}  size {:>5}  {:?}  mean {:.0} W  medoid {}",
            c.class_id, c.size, c.intensity_label, c.mean_power, c.medoid_job_id
        );
    }
    Ok(())
}
