//! run

use std::path::PathBuf;

use clap::Args;

use powerprof::workflow::{run_pipeline, PipelineConfig};
use powerprof::Result;

use crate::common::Global;

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Telemetry CSV; replaces the config's inputs together with --jobs
    #[arg(long, requires = "jobs", conflicts_with = "profiles")]
    telemetry: Option<PathBuf>,
    #[arg(long, requires = "telemetry")]
    jobs: Option<PathBuf>,
    /// Profiles JSONL; replaces the config's inputs
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// GAN epochs
    #[arg(long)]
    epochs: Option<usize>,
}

/// `--config` is a PipelineConfig.
pub fn run(g: &Global, a: RunArgs) -> Result<()> {
    let out = g.out()?;
    let mut cfg: PipelineConfig = g.load_config()?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.gan.epochs = e;
    }
    if a.telemetry.is_some() || a.profiles.is_some() {
        cfg.inputs.telemetry = a.telemetry;
        cfg.inputs.jobs = a.jobs;
        cfg.inputs.profiles = a.profiles;
    }
    let run = run_pipeline(&cfg, out)?;
    println!(
        "{} profiles, {} clusters ({} noise), {} classes; tau* {:.4}, balanced accuracy {:.3}",
        run.profiles.len(),
        run.clusters.num_clusters(),
        run.clusters.noise_count(),
        run.catalog.classes.len(),
        run.classifier.threshold,
        run.sweep.best_accuracy
    );
    for a in &run.manifest.artifacts {
        println!("  {:<10} {:<16} {}", a.stage, a.path, a.sha256);
    }
    Ok(())
}
