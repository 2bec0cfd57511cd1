//! `powerprof` command-line interface.

mod cmd;
mod common;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use common::Global;

#[derive(Debug, Parser)]
#[command(name = "powerprof", version, about = "Job-level HPC power profiling")]
struct Cli {
    /// JSON config for the subcommand
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed; overrides any seed in the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file or directory
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Commands,
}

#[derive(Debug, Subcommand)]
enum Commands {
    /// Generate a labeled synthetic dataset
    Synth(cmd::data::SynthArgs),
    /// Join telemetry and job records into 10 s profiles
    Ingest(cmd::data::IngestArgs),
    /// Extract the 186-column feature matrix
    Features(cmd::data::FeaturesArgs),
    /// Train the GAN embedding model
    TrainGan(cmd::model::TrainGanArgs),
    /// Embed features into the latent space
    Embed(cmd::model::EmbedArgs),
    /// Cluster latent vectors
    Cluster(cmd::model::ClusterArgs),
    /// Build the class catalog from a clustering
    Label(cmd::model::LabelArgs),
    /// Train the open-set classifier on a catalog
    TrainClassifier(cmd::classify::TrainArgs),
    /// Label jobs or flag them UNKNOWN
    Classify(cmd::classify::ClassifyArgs),
    /// Sweep the rejection threshold
    Sweep(cmd::classify::SweepArgs),
    /// Closed/open-set metrics on labeled latents
    Evaluate(cmd::classify::EvaluateArgs),
    /// Sliding-window evaluation over submit time
    TemporalEval(cmd::classify::TemporalArgs),
    /// Add rejected jobs to the unknown pool
    Pool(cmd::review::PoolArgs),
    /// Cluster the unknown pool into class proposals
    Recluster(cmd::review::ReclusterArgs),
    /// List, approve or reject class proposals
    Review(cmd::review::ReviewArgs),
    /// Retrain the classifier with approved classes
    Retrain(cmd::review::RetrainArgs),
    /// Run the whole batch pipeline
    Run(cmd::run::RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    let g = Global {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
    };
    let result = match cli.command {
        Commands::Synth(a) => cmd::data::synth(&g, a),
        Commands::Ingest(a) => cmd::data::ingest(&g, a),
        Commands::Features(a) => cmd::data::features(&g, a),
        Commands::TrainGan(a) => cmd::model::train_gan(&g, a),
        Commands::Embed(a) => cmd::model::embed(&g, a),
        Commands::Cluster(a) => cmd::model::cluster(&g, a),
        Commands::Label(a) => cmd::model::label(&g, a),
        Commands::TrainClassifier(a) => cmd::classify::train(&g, a),
        Commands::Classify(a) => cmd::classify::classify(&g, a),
        Commands::Sweep(a) => cmd::classify::sweep(&g, a),
        Commands::Evaluate(a) => cmd::classify::evaluate(&g, a),
        Commands::TemporalEval(a) => cmd::classify::temporal(&g, a),
        Commands::Pool(a) => cmd::review::pool(&g, a),
        Commands::Recluster(a) => cmd::review::recluster(&g, a),
        Commands::Review(a) => cmd::review::review(&g, a),
        Commands::Retrain(a) => cmd::review::retrain(&g, a),
        Commands::Run(a) => cmd::run::run(&g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
