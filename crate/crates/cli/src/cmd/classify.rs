//! train-classifier, classify, sweep, evaluate, temporal-eval

use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;

use clap::Args;

use powerprof::cluster::ClassCatalog;
use powerprof::openset::{evaluate as eval_metrics, sweep_threshold, ClassifierConfig, ClassifierModel};
use powerprof::synth::load_labels;
use powerprof::workflow::pipeline::{latent_map, save_sweep_csv, stage_seed};
use powerprof::workflow::{
    fit_classifier, kinds, load_artifact, save_artifact, temporal_eval, TemporalConfig, TemporalSample,
};
use powerprof::{Error, Result};

use crate::common::{class_labels, latents, parse_threshold, split_latents, write_json, write_jsonl, Global};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Latent CSV covering the catalog's members
    #[arg(long)]
    latents: PathBuf,
    /// Class catalog artifact
    #[arg(long)]
    labels: PathBuf,
    /// Latent CSV of unknown jobs for the threshold sweep; defaults to the
    /// catalog's residual jobs
    #[arg(long)]
    unknown: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Prior draws used for the sweep when no unknown jobs are available
    #[arg(long, default_value_t = 200)]
    prior_unknowns: usize,
    /// Also write the sweep curve here
    #[arg(long)]
    sweep_out: Option<PathBuf>,
}

/// `--config` is a ClassifierConfig.
pub fn train(g: &Global, a: TrainArgs) -> Result<()> {
    let out = g.out()?;
    let mut cfg: ClassifierConfig = g.load_config()?;
    let seed = g.seed.unwrap_or(cfg.seed);
    cfg.seed = stage_seed(seed, "classifier");
    cfg.validate()?;
    if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
        return Err(Error::config("--train-fraction must be in (0,1)"));
    }
    let catalog: ClassCatalog = load_artifact(&a.labels, kinds::CATALOG)?;
    let points = latent_map(&latents(&a.latents)?);
    let unknown: Vec<Vec<f64>> = match &a.unknown {
        Some(p) => split_latents(&latents(p)?).1,
        None => catalog.residual.iter().filter_map(|id| points.get(id).cloned()).collect(),
    };
    let mut fit = fit_classifier(
        &catalog,
        &points,
        &unknown,
        &cfg,
        a.train_fraction,
        stage_seed(seed, "split"),
        stage_seed(seed, "unknowns"),
        a.prior_unknowns,
    )?;
    fit.model.catalog_digest = Some(powerprof::workflow::artifact::file_digest(&a.labels)?);
    save_artifact(out, kinds::CLASSIFIER, &fit.model)?;
    if let Some(p) = &a.sweep_out {
        save_sweep_csv(p, &fit.sweep)?;
    }
    println!(
        "{} classes, {} train / {} held out; tau* {:.4} (train p95 {:.4}), balanced accuracy {:.3}",
        fit.model.num_classes(),
        fit.split.train.len(),
        fit.split.heldout.len(),
        fit.model.threshold,
        fit.model.train_distance_p95,
        fit.sweep.best_accuracy
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Classifier model artifact
    #[arg(long)]
    model: PathBuf,
    /// Latent CSV
    #[arg(long)]
    latents: PathBuf,
    /// Rejection threshold, or auto for the model's swept value
    #[arg(long, default_value = "auto", allow_hyphen_values = true)]
    threshold: String,
}

pub fn classify(g: &Global, a: ClassifyArgs) -> Result<()> {
    let out = g.out()?;
    let model: ClassifierModel = load_artifact(&a.model, kinds::CLASSIFIER)?;
    let tau = parse_threshold(&a.threshold, model.threshold)?;
    let (ids, x) = split_latents(&latents(&a.latents)?);
    let preds = model.predict_many(&ids, &x, tau)?;
    write_jsonl(out, &preds)?;
    let unknown = preds.iter().filter(|p| p.outcome.class().is_none()).count();
    println!("{} jobs at tau {tau:.4}: {} known, {unknown} UNKNOWN", preds.len(), preds.len() - unknown);
    Ok(())
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Classifier model artifact
    #[arg(long)]
    model: PathBuf,
    /// Latent CSV of known-class jobs
    #[arg(long)]
    known: PathBuf,
    /// Labels for the known jobs: catalog artifact or labels.csv
    #[arg(long)]
    labels: PathBuf,
    /// Latent CSV of unknown jobs
    #[arg(long)]
    unknown: PathBuf,
    #[arg(long)]
    grid: Option<usize>,
}

pub fn sweep(g: &Global, a: SweepArgs) -> Result<()> {
    let out = g.out()?;
    let model: ClassifierModel = load_artifact(&a.model, kinds::CLASSIFIER)?;
    let labels = class_labels(&a.labels)?;
    let known: Vec<(Vec<f64>, u32)> = latents(&a.known)?
        .into_iter()
        .filter_map(|r| labels.get(&r.job_id).map(|&c| (r.values, c)))
        .collect();
    if known.is_empty() {
        return Err(Error::data("no known job has a label"));
    }
    let unknown = split_latents(&latents(&a.unknown)?).1;
    let result = sweep_threshold(&model, &known, &unknown, a.grid.unwrap_or(model.config.grid_size))?;
    save_sweep_csv(out, &result)?;
    println!(
        "{} known, {} unknown; best tau {:.4} (balanced accuracy {:.3}); acc(0) {:.3}, acc(max) {:.3}",
        known.len(),
        unknown.len(),
        result.best_tau,
        result.best_accuracy,
        result.accuracy_at_zero(),
        result.accuracy_at_max()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Classifier model artifact
    #[arg(long)]
    model: PathBuf,
    /// Latent CSV
    #[arg(long)]
    latents: PathBuf,
    /// Ground truth: catalog artifact or labels.csv. Jobs whose class the
    /// model does not know count as unknown.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "auto", allow_hyphen_values = true)]
    threshold: String,
}

/// Prints metrics JSON; `--out` also writes it to a file.
pub fn evaluate(g: &Global, a: EvaluateArgs) -> Result<()> {
    let model: ClassifierModel = load_artifact(&a.model, kinds::CLASSIFIER)?;
    let tau = parse_threshold(&a.threshold, model.threshold)?;
    let labels = class_labels(&a.labels)?;
    let test: Vec<(Vec<f64>, Option<u32>)> = latents(&a.latents)?
        .into_iter()
        .filter_map(|r| {
            let c = *labels.get(&r.job_id)?;
            Some((r.values, model.class_ids.contains(&c).then_some(c)))
        })
        .collect();
    let metrics = eval_metrics(&model, tau, &test)?;
    if let Some(out) = &g.out {
        write_json(out, &metrics)?;
    }
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

#[derive(Debug, Args)]
pub struct TemporalArgs {
    /// Latent CSV
    #[arg(long)]
    latents: PathBuf,
    /// labels.csv with job_id,class_id,submit_epoch
    #[arg(long)]
    labels: PathBuf,
    /// Also write every split as JSON here
    #[arg(long)]
    splits: Option<PathBuf>,
}

/// `--config` is a TemporalConfig. Writes the (months, horizon) table as CSV.
pub fn temporal(g: &Global, a: TemporalArgs) -> Result<()> {
    let out = g.out()?;
    let mut cfg: TemporalConfig = g.load_config()?;
    if let Some(s) = g.seed {
        cfg.classifier.seed = s;
    }
    let (labels, stamps) = load_labels(&a.labels)?;
    let samples: Vec<TemporalSample> = latents(&a.latents)?
        .into_iter()
        .filter_map(|r| {
            let class_id = u32::try_from(*labels.get(&r.job_id)?).ok()?;
            let timestamp = *stamps.get(&r.job_id)?;
            Some(TemporalSample {
                job_id: r.job_id,
                latent: r.values,
                class_id,
                timestamp,
            })
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::data("no latent row has a label and timestamp"));
    }
    let report = temporal_eval(&samples, &cfg)?;
    report.write_csv(BufWriter::new(fs::File::create(out)?))?;
    if let Some(p) = &a.splits {
        write_json(p, &report.splits)?;
    }
    println!("months horizon windows closed open known");
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.3}"));
    for c in &report.cells {
        println!(
            "{:>6} {:>7} {:>7} {:>6} {:>5} {:>5}",
            c.train_months,
            c.horizon_days,
            c.windows,
            fmt(c.mean_closed_acc),
            fmt(c.mean_open_acc),
            fmt(c.mean_known_classes)
        );
    }
    Ok(())
}
