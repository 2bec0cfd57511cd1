//! pool, recluster, review, retrain

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;

use powerprof::cluster::ClassCatalog;
use powerprof::features::load_feature_csv;
use powerprof::ingest::{self, JobProfile};
use powerprof::openset::{ClassifierConfig, ClassifierModel};
use powerprof::workflow::pipeline::{latent_map, save_sweep_csv, stage_seed};
use powerprof::workflow::{
    export_proposal, kinds, load_artifact, recluster_unknowns, retrain as retrain_model, review as record_review,
    save_artifact, CatalogLock, ModelArchive, ProposalBook, ProposalStatus, ReclusterParams, RetrainParams,
    UnknownPool, Verdict,
};
use powerprof::{Error, Result};

use crate::common::{latents, now_epoch, parse_threshold, split_latents, Global};

/// Loads a state artifact, or its default when the file does not exist yet.
fn load_or_default<T: DeserializeOwned + Default>(path: &Path, kind: &str) -> Result<T> {
    if path.exists() {
        load_artifact(path, kind)
    } else {
        Ok(T::default())
    }
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    /// Classifier model artifact
    #[arg(long)]
    model: PathBuf,
    /// Latent CSV of the new jobs
    #[arg(long)]
    latents: PathBuf,
    /// Feature matrix CSV of the new jobs
    #[arg(long)]
    features: PathBuf,
    /// Profiles JSONL of the new jobs
    #[arg(long)]
    profiles: PathBuf,
    /// Unknown pool state; created when missing
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value = "auto", allow_hyphen_values = true)]
    threshold: String,
}

pub fn pool(_g: &Global, a: PoolArgs) -> Result<()> {
    let model: ClassifierModel = load_artifact(&a.model, kinds::CLASSIFIER)?;
    let tau = parse_threshold(&a.threshold, model.threshold)?;
    let mut pool: UnknownPool = load_or_default(&a.pool, kinds::POOL)?;
    let (ids, x) = split_latents(&latents(&a.latents)?);
    let features: BTreeMap<String, _> = load_feature_csv(&a.features)?
        .into_iter()
        .map(|f| (f.job_id.clone(), f))
        .collect();
    let profiles: BTreeMap<String, JobProfile> = ingest::load_profiles(&a.profiles)?
        .into_iter()
        .map(|p| (p.job_id.clone(), p))
        .collect();
    let preds = model.predict_many(&ids, &x, tau)?;
    let mut added = 0;
    let mut rejected = 0;
    for (p, z) in preds.iter().zip(&x) {
        if p.outcome.class().is_some() {
            continue;
        }
        rejected += 1;
        let f = features
            .get(&p.job_id)
            .ok_or_else(|| Error::data(format!("no features for job {}", p.job_id)))?;
        let prof = profiles
            .get(&p.job_id)
            .ok_or_else(|| Error::data(format!("no profile for job {}", p.job_id)))?;
        if pool.admit(p, z, f, prof) {
            added += 1;
        }
    }
    save_artifact(&a.pool, kinds::POOL, &pool)?;
    println!(
        "{} jobs at tau {tau:.4}: {rejected} UNKNOWN, {added} added; pool now holds {}",
        preds.len(),
        pool.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReclusterArgs {
    /// Unknown pool state
    #[arg(long)]
    pool: PathBuf,
    /// Proposal book; created when missing
    #[arg(long)]
    proposals: PathBuf,
    /// Fixed DBSCAN radius; picked from the k-distance graph when absent
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    #[arg(long)]
    min_class_size: Option<usize>,
    /// Member profiles per proposal written to the samples CSV
    #[arg(long, default_value_t = 20)]
    samples: usize,
}

/// `--config` is a ReclusterParams. `--out DIR` receives plot-ready CSVs.
pub fn recluster(g: &Global, a: ReclusterArgs) -> Result<()> {
    let mut params: ReclusterParams = g.load_config()?;
    if a.eps.is_some() {
        params.eps = a.eps;
    }
    if let Some(m) = a.min_pts {
        params.min_pts = m;
    }
    if let Some(m) = a.min_class_size {
        params.min_class_size = m;
    }
    if params.min_pts == 0 || params.eps.is_some_and(|e| !(e > 0.0)) {
        return Err(Error::config("recluster needs eps > 0 and min_pts >= 1"));
    }
    let mut pool: UnknownPool = load_artifact(&a.pool, kinds::POOL)?;
    let mut book: ProposalBook = load_or_default(&a.proposals, kinds::PROPOSALS)?;
    let before = pool.len();
    let ids = recluster_unknowns(&mut pool, &mut book, &params)?;
    save_artifact(&a.proposals, kinds::PROPOSALS, &book)?;
    save_artifact(&a.pool, kinds::POOL, &pool)?;
    println!("{before} pooled jobs, {} new proposal(s), {} left in pool", ids.len(), pool.len());
    for id in &ids {
        let p = book.get(*id).expect("just created");
        println!("  proposal {id}: {} members, medoid {}", p.size, p.medoid_job_id);
        if let Some(dir) = &g.out {
            for f in export_proposal(dir, p, a.samples)? {
                println!("    {}", f.display());
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Action {
    List,
    Approve,
    Reject,
}

#[derive(Debug, Args)]
pub struct ReviewArgs {
    #[arg(value_enum)]
    action: Action,
    /// Proposal id (approve/reject)
    id: Option<u32>,
    /// Proposal book
    #[arg(long)]
    proposals: PathBuf,
    /// Class catalog artifact (approve/reject)
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Unknown pool state (approve/reject)
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Who made the decision
    #[arg(long)]
    operator: Option<String>,
}

pub fn review(_g: &Global, a: ReviewArgs) -> Result<()> {
    let action = match a.action {
        Action::List => None,
        Action::Approve => Some(Verdict::Approve),
        Action::Reject => Some(Verdict::Reject),
    };
    let Some(verdict) = action else {
        let book: ProposalBook = load_artifact(&a.proposals, kinds::PROPOSALS)?;
        println!("id  status    size  class  medoid");
        for p in &book.proposals {
            let status = match p.status {
                ProposalStatus::Pending => "pending",
                ProposalStatus::Approved => "approved",
                ProposalStatus::Rejected => "rejected",
            };
            let class = p.proposed_class_id.map_or("-".to_string(), |c| c.to_string());
            println!("{:<3} {status:<9} {:>4}  {class:>5}  {}", p.proposal_id, p.size, p.medoid_job_id);
        }
        for r in &book.log {
            println!("log: proposal {} {:?} by {} at {}", r.proposal_id, r.verdict, r.operator, r.timestamp);
        }
        return Ok(());
    };
    let id = a.id.ok_or_else(|| Error::config("approve/reject needs a proposal id"))?;
    let operator = a
        .operator
        .filter(|o| !o.trim().is_empty())
        .ok_or_else(|| Error::config("approve/reject needs --operator"))?;
    let catalog_path = a.catalog.ok_or_else(|| Error::config("approve/reject needs --catalog"))?;
    let pool_path = a.pool.ok_or_else(|| Error::config("approve/reject needs --pool"))?;

    let _lock = CatalogLock::acquire(&catalog_path)?;
    let mut book: ProposalBook = load_artifact(&a.proposals, kinds::PROPOSALS)?;
    let mut catalog: ClassCatalog = load_artifact(&catalog_path, kinds::CATALOG)?;
    let mut pool: UnknownPool = load_or_default(&pool_path, kinds::POOL)?;
    let p = record_review(&mut book, &mut catalog, &mut pool, id, verdict, &operator, now_epoch())?;
    save_artifact(&catalog_path, kinds::CATALOG, &catalog)?;
    save_artifact(&pool_path, kinds::POOL, &pool)?;
    save_artifact(&a.proposals, kinds::PROPOSALS, &book)?;
    match p.proposed_class_id {
        Some(c) => println!("proposal {id} approved as class {c} ({} members)", p.size),
        None => println!("proposal {id} rejected; {} members back in the pool", p.size),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct RetrainArgs {
    /// Class catalog artifact
    #[arg(long)]
    catalog: PathBuf,
    /// Proposal book
    #[arg(long)]
    proposals: PathBuf,
    /// Current classifier model artifact
    #[arg(long)]
    model: PathBuf,
    /// Latent CSV of the original catalog members
    #[arg(long)]
    latents: PathBuf,
    /// Unknown pool; its members join the unknown validation set
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Model archive; created when missing
    #[arg(long)]
    archive: PathBuf,
    /// Retrain even without newly approved classes
    #[arg(long)]
    force: bool,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 200)]
    prior_unknowns: usize,
    #[arg(long)]
    sweep_out: Option<PathBuf>,
}

/// `--config` is a ClassifierConfig; without one the current model's is
/// reused.
pub fn retrain(g: &Global, a: RetrainArgs) -> Result<()> {
    let out = g.out()?;
    let previous: ClassifierModel = load_artifact(&a.model, kinds::CLASSIFIER)?;
    let mut cfg: ClassifierConfig = g.read_config()?.unwrap_or_else(|| previous.config.clone());
    let seed = g.seed.unwrap_or(cfg.seed);
    cfg.seed = stage_seed(seed, "classifier");
    cfg.validate()?;
    let _lock = CatalogLock::acquire(&a.catalog)?;
    let catalog: ClassCatalog = load_artifact(&a.catalog, kinds::CATALOG)?;
    let mut book: ProposalBook = load_artifact(&a.proposals, kinds::PROPOSALS)?;
    let mut archive: ModelArchive = load_or_default(&a.archive, kinds::ARCHIVE)?;
    let base = latent_map(&latents(&a.latents)?);
    let mut unknown: Vec<Vec<f64>> = catalog.residual.iter().filter_map(|id| base.get(id).cloned()).collect();
    if let Some(p) = &a.pool {
        let pool: UnknownPool = load_artifact(p, kinds::POOL)?;
        unknown.extend(pool.latents());
    }
    let params = RetrainParams {
        train_fraction: a.train_fraction,
        split_seed: stage_seed(seed, "split"),
        unknown_seed: stage_seed(seed, "unknowns"),
        prior_unknowns: a.prior_unknowns,
        force: a.force,
    };
    let Some(outcome) = retrain_model(&catalog, &mut book, &base, &unknown, &previous, &mut archive, &cfg, &params)?
    else {
        println!("nothing approved since the last retrain; pass --force to retrain anyway");
        return Ok(());
    };
    let model = &outcome.fit.model;
    save_artifact(out, kinds::CLASSIFIER, model)?;
    save_artifact(&a.archive, kinds::ARCHIVE, &archive)?;
    save_artifact(&a.proposals, kinds::PROPOSALS, &book)?;
    if let Some(p) = &a.sweep_out {
        save_sweep_csv(p, &outcome.fit.sweep)?;
    }
    println!(
        "model v{} -> v{}: {} -> {} classes (added {:?}); tau* {:.4}, balanced accuracy {:.3}",
        outcome.archived.model_version,
        model.model_version,
        outcome.archived.class_ids.len(),
        model.num_classes(),
        outcome.added_classes,
        model.threshold,
        outcome.fit.sweep.best_accuracy
    );
    Ok(())
}
