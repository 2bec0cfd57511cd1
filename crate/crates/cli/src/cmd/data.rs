//! synth, ingest, features

use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;

use clap::Args;

use powerprof::features::{extract_all, save_feature_csv};
use powerprof::ingest::{self, DropReason};
use powerprof::synth::{generate_dataset, novel_pattern, render_telemetry, standard_palette, PatternSpec, SynthConfig};
use powerprof::{Error, Result};

use crate::common::{write_jsonl, Global};

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON list of pattern specs; the built-in 8-pattern palette if absent
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Job id prefix
    #[arg(long)]
    prefix: Option<String>,
    /// Append the held-back novel pattern as an extra class
    #[arg(long)]
    novel: bool,
    /// Also write telemetry.csv and jobs.jsonl rendered from the profiles
    #[arg(long)]
    telemetry: bool,
}

/// `--config` is a SynthConfig; flags override it.
pub fn synth(g: &Global, a: SynthArgs) -> Result<()> {
    let out = g.out()?;
    let mut cfg: SynthConfig = g
        .read_config()?
        .unwrap_or_else(|| SynthConfig::new(250, (60, 360), 0));
    if let Some(n) = a.per_class {
        cfg.jobs_per_class = n;
    }
    if let Some(m) = a.min_len {
        cfg.length_range.0 = m;
    }
    if let Some(m) = a.max_len {
        cfg.length_range.1 = m;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.prefix {
        cfg.id_prefix = p;
    }
    let mut specs: Vec<PatternSpec> = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("invalid spec file: {e}")))?
        }
        None => standard_palette(),
    };
    if a.novel {
        specs.push(novel_pattern());
    }
    let ds = generate_dataset(&specs, &cfg)?;
    ds.save(out)?;
    if a.telemetry {
        let (jobs, samples) = render_telemetry(&ds, 1)?;
        ingest::write_telemetry(BufWriter::new(fs::File::create(out.join("telemetry.csv"))?), &samples)?;
        write_jsonl(&out.join("jobs.jsonl"), &jobs)?;
    }
    println!(
        "{} jobs in {} classes written to {}",
        ds.profiles.len(),
        ds.num_classes,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Telemetry CSV (timestamp,hostname,input_power_w)
    #[arg(long)]
    telemetry: PathBuf,
    /// Job records, one JSON object per line
    #[arg(long)]
    jobs: PathBuf,
}

pub fn ingest(g: &Global, a: IngestArgs) -> Result<()> {
    let out = g.out()?;
    let samples = ingest::parse_telemetry(&a.telemetry)?;
    let jobs = ingest::parse_jobs(&a.jobs)?;
    let (profiles, summary) = ingest::build_profiles(&jobs, &samples);
    for (id, reason) in &summary.dropped {
        log::info!("dropped {id}: {reason:?}");
    }
    ingest::save_profiles(out, &profiles)?;
    println!(
        "{} jobs, {} profiles; dropped {} missing node, {} leading gap, {} too short",
        summary.jobs_in,
        summary.profiles_out,
        summary.count(DropReason::MissingNode),
        summary.count(DropReason::LeadingGap),
        summary.count(DropReason::TooShort)
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// Profiles JSONL
    #[arg(long)]
    profiles: PathBuf,
}

pub fn features(g: &Global, a: FeaturesArgs) -> Result<()> {
    let out = g.out()?;
    let profiles = ingest::load_profiles(&a.profiles)?;
    let rows = extract_all(&profiles)?;
    save_feature_csv(out, &rows)?;
    println!("{} feature rows written to {}", rows.len(), out.display());
    Ok(())
}
