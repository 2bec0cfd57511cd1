use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use powerprof::cluster::ClassCatalog;
use powerprof::gan::{load_latents_csv, LatentVector};
use powerprof::synth::load_labels;
use powerprof::workflow::{kinds, load_artifact};
use powerprof::{Error, Result};

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Global {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Global {
    pub fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::config("--out is required for this command"))
    }

    /// The subcommand's config from `--config`, or its defaults.
    pub fn load_config<T: DeserializeOwned + Default>(&self) -> Result<T> {
        Ok(self.read_config()?.unwrap_or_default())
    }

    pub fn read_config<T: DeserializeOwned>(&self) -> Result<Option<T>> {
        let Some(path) = &self.config else {
            return Ok(None);
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn latents(path: &Path) -> Result<Vec<LatentVector>> {
    let rows = load_latents_csv(path)?;
    if rows.is_empty() {
        return Err(Error::data(format!("{} holds no latent vectors", path.display())));
    }
    Ok(rows)
}

pub fn split_latents(rows: &[LatentVector]) -> (Vec<String>, Vec<Vec<f64>>) {
    rows.iter().map(|r| (r.job_id.clone(), r.values.clone())).unzip()
}

/// Class labels from a catalog artifact (`.json`) or a `labels.csv`
/// (`job_id,class_id,submit_epoch`).
pub fn class_labels(path: &Path) -> Result<BTreeMap<String, u32>> {
    if path.extension().is_some_and(|e| e == "json") {
        let catalog: ClassCatalog = load_artifact(path, kinds::CATALOG)?;
        return Ok(catalog.assignments());
    }
    let (labels, _) = load_labels(path)?;
    labels
        .into_iter()
        .map(|(k, v)| {
            u32::try_from(v)
                .map(|v| (k, v))
                .map_err(|_| Error::data("class id out of range"))
        })
        .collect()
}

/// `"auto"` keeps the model's swept threshold.
pub fn parse_threshold(raw: &str, model_tau: f64) -> Result<f64> {
    if raw.eq_ignore_ascii_case("auto") {
        return Ok(model_tau);
    }
    match raw.parse::<f64>() {
        Ok(t) if t >= 0.0 && t.is_finite() => Ok(t),
        _ => Err(Error::config(format!(
            "--threshold must be a non-negative number or auto, got {raw:?}"
        ))),
    }
}

pub fn now_epoch() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs() as i64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_parsing() {
        assert_eq!(parse_threshold("auto", 1.5).unwrap(), 1.5);
        assert_eq!(parse_threshold("AUTO", 1.5).unwrap(), 1.5);
        assert_eq!(parse_threshold("0.25", 1.5).unwrap(), 0.25);
        assert_eq!(parse_threshold("0", 1.5).unwrap(), 0.0);
        for bad in ["-1", "nan", "inf", "x"] {
            assert_eq!(parse_threshold(bad, 1.5).unwrap_err().exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn labels_from_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        fs::write(&p, "job_id,class_id,submit_epoch\na,3,10\nb,0,20\n").unwrap();
        let m = class_labels(&p).unwrap();
        assert_eq!(m["a"], 3);
        assert_eq!(m["b"], 0);
    }

    #[test]
    fn missing_out_is_a_config_error() {
        let g = Global {
            config: None,
            seed: None,
            out: None,
        };
        assert_eq!(g.out().unwrap_err().exit_code(), 2);
        let c: powerprof::openset::ClassifierConfig = g.load_config().unwrap();
        assert_eq!(c, Default::default());
    }
}
