//! Labeled synthetic job power profiles built from a small set of
//! parameterized pattern families.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, JobProfile, MIN_PROFILE_LEN};

/// 30-day block used as the synthetic calendar month.
pub const MONTH_SECONDS: i64 = 30 * 86_400;

/// 2021-01-01T00:00:00Z.
pub const DEFAULT_YEAR_START: i64 = 1_609_459_200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Constant,
    SquareWave,
    RampUp,
    RampDown,
    SpikeTrain,
    PlateauShift,
    NoiseFlat,
}

impl Family {
    pub fn is_periodic(self) -> bool {
        matches!(
            self,
            Family::SquareWave | Family::RampUp | Family::RampDown | Family::SpikeTrain
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intensity {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub family: Family,
    pub base_power: f64,
    #[serde(default)]
    pub swing_amplitude: f64,
    #[serde(default = "default_period")]
    pub period: usize,
    #[serde(default)]
    pub noise_std: f64,
    pub intensity: Intensity,
    /// First synthetic month (0-based) in which jobs of this pattern are
    /// submitted.
    #[serde(default)]
    pub first_month: u32,
}

fn default_period() -> usize {
    4
}

impl PatternSpec {
    pub fn new(family: Family, base_power: f64, swing_amplitude: f64, period: usize) -> Self {
        Self {
            family,
            base_power,
            swing_amplitude,
            period,
            noise_std: 0.0,
            intensity: Intensity::Low,
            first_month: 0,
        }
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn with_intensity(mut self, intensity: Intensity) -> Self {
        self.intensity = intensity;
        self
    }

    pub fn starting_month(mut self, month: u32) -> Self {
        self.first_month = month;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_power > 0.0 && self.base_power.is_finite()) {
            return Err(Error::config(format!(
                "base_power must be > 0, got {}",
                self.base_power
            )));
        }
        if !(self.swing_amplitude >= 0.0 && self.swing_amplitude.is_finite()) {
            return Err(Error::config("swing_amplitude must be >= 0"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be >= 0"));
        }
        if self.family.is_periodic() && self.period < 2 {
            return Err(Error::config(format!(
                "{:?} requires period >= 2, got {}",
                self.family, self.period
            )));
        }
        Ok(())
    }

    /// Noise-free value at window `t` of an `n`-window profile. `jitter` is
    /// a uniform draw in [-0.5, 0.5), used only by `NoiseFlat`.
    fn kernel(&self, t: usize, n: usize, jitter: f64) -> f64 {
        let base = self.base_power;
        let amp = self.swing_amplitude;
        let p = self.period.max(2);
        match self.family {
            Family::Constant => base,
            Family::SquareWave => {
                let half = (p / 2).max(1);
                if (t / half) % 2 == 0 {
                    base + amp / 2.0
                } else {
                    base - amp / 2.0
                }
            }
            Family::RampUp => base - amp / 2.0 + amp * (t % p) as f64 / (p - 1) as f64,
            Family::RampDown => base + amp / 2.0 - amp * (t % p) as f64 / (p - 1) as f64,
            Family::SpikeTrain => {
                if t % p == p - 1 {
                    base + amp
                } else {
                    base
                }
            }
            Family::PlateauShift => {
                if t < n / 2 {
                    base
                } else {
                    base + amp
                }
            }
            Family::NoiseFlat => base + amp * jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub jobs_per_class: usize,
    pub length_range: (usize, usize),
    pub seed: u64,
    #[serde(default = "default_year_start")]
    pub year_start: i64,
    #[serde(default = "default_months")]
    pub months: u32,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_year_start() -> i64 {
    DEFAULT_YEAR_START
}
fn default_months() -> u32 {
    12
}
fn default_prefix() -> String {
    "job".into()
}

impl SynthConfig {
    pub fn new(jobs_per_class: usize, length_range: (usize, usize), seed: u64) -> Self {
        Self {
            jobs_per_class,
            length_range,
            seed,
            year_start: DEFAULT_YEAR_START,
            months: 12,
            id_prefix: default_prefix(),
        }
    }

    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.id_prefix = prefix.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SynthDataset {
    /// Sorted by job_id.
    pub profiles: Vec<JobProfile>,
    pub labels: BTreeMap<String, usize>,
    pub timestamps: BTreeMap<String, i64>,
    pub num_classes: usize,
}

impl SynthDataset {
    pub fn label_vec(&self) -> Vec<usize> {
        self.profiles
            .iter()
            .map(|p| self.labels[&p.job_id])
            .collect()
    }

    pub fn timestamp_vec(&self) -> Vec<i64> {
        self.profiles
            .iter()
            .map(|p| self.timestamps[&p.job_id])
            .collect()
    }

    /// Appends `other`, shifting its class ids by `self.num_classes`.
    pub fn merge(&mut self, other: SynthDataset) {
        let offset = self.num_classes;
        for p in other.profiles {
            let id = p.job_id.clone();
            assert!(!self.labels.contains_key(&id), "duplicate job id {id}");
            self.labels.insert(id.clone(), other.labels[&id] + offset);
            self.timestamps.insert(id, other.timestamps[&p.job_id]);
            self.profiles.push(p);
        }
        self.profiles.sort_by(|a, b| a.job_id.cmp(&b.job_id));
        self.num_classes += other.num_classes;
    }

    pub fn write_labels<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["job_id", "class_id", "submit_epoch"])?;
        for p in &self.profiles {
            w.write_record([
                p.job_id.clone(),
                self.labels[&p.job_id].to_string(),
                self.timestamps[&p.job_id].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `profiles.jsonl` and `labels.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        ingest::save_profiles(dir.join("profiles.jsonl"), &self.profiles)?;
        let f = std::fs::File::create(dir.join("labels.csv"))?;
        self.write_labels(std::io::BufWriter::new(f))
    }
}

/// Reads `labels.csv` into `(job_id -> class, job_id -> submit epoch)`.
pub fn load_labels(
    path: impl AsRef<Path>,
) -> Result<(BTreeMap<String, usize>, BTreeMap<String, i64>)> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let mut labels = BTreeMap::new();
    let mut stamps = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Parse {
            line: i as u64 + 2,
            msg: "malformed labels row".into(),
        };
        if rec.len() != 3 {
            return Err(bad());
        }
        labels.insert(rec[0].to_string(), rec[1].parse().map_err(|_| bad())?);
        stamps.insert(rec[0].to_string(), rec[2].parse().map_err(|_| bad())?);
    }
    Ok((labels, stamps))
}

pub fn generate_dataset(specs: &[PatternSpec], cfg: &SynthConfig) -> Result<SynthDataset> {
    if specs.is_empty() {
        return Err(Error::config("at least one pattern spec is required"));
    }
    if cfg.jobs_per_class == 0 {
        return Err(Error::config("jobs_per_class must be >= 1"));
    }
    let (lo, hi) = cfg.length_range;
    if lo < MIN_PROFILE_LEN {
        return Err(Error::config(format!(
            "length_range min {lo} < min_profile_len {MIN_PROFILE_LEN}"
        )));
    }
    if hi < lo {
        return Err(Error::config(format!("length_range [{lo},{hi}] is empty")));
    }
    if cfg.months == 0 {
        return Err(Error::config("months must be >= 1"));
    }
    for s in specs {
        s.validate()?;
        if s.first_month >= cfg.months {
            return Err(Error::config(format!(
                "first_month {} outside a {}-month year",
                s.first_month, cfg.months
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let year_end = cfg.year_start + cfg.months as i64 * MONTH_SECONDS;
    let mut ds = SynthDataset {
        num_classes: specs.len(),
        ..Default::default()
    };

    for (class, spec) in specs.iter().enumerate() {
        let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
        for j in 0..cfg.jobs_per_class {
            let n = rng.random_range(lo..=hi);
            let submit_lo = cfg.year_start + spec.first_month as i64 * MONTH_SECONDS;
            let submit = rng.random_range(submit_lo..year_end);
            let values: Vec<f64> = (0..n)
                .map(|t| {
                    let jitter = if spec.family == Family::NoiseFlat {
                        rng.random::<f64>() - 0.5
                    } else {
                        0.0
                    };
                    let mut v = spec.kernel(t, n, jitter);
                    if spec.noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    v.max(0.0)
                })
                .collect();
            let job_id = format!("{}-{:03}-{:05}", cfg.id_prefix, class, j);
            ds.labels.insert(job_id.clone(), class);
            ds.timestamps.insert(job_id.clone(), submit);
            ds.profiles.push(JobProfile::new(job_id, submit, 1, values));
        }
    }
    ds.profiles.sort_by(|a, b| a.job_id.cmp(&b.job_id));
    Ok(ds)
}

/// Eight base patterns spanning the compute-intensive / mixed /
/// non-compute groups at high and low power, with swing magnitudes that
/// land in distinct ranges.
pub fn standard_palette() -> Vec<PatternSpec> {
    use Family::*;
    use Intensity::*;
    vec![
        PatternSpec::new(Constant, 2000.0, 0.0, 4)
            .with_noise(8.0)
            .with_intensity(High),
        PatternSpec::new(Constant, 150.0, 0.0, 4)
            .with_noise(3.0)
            .with_intensity(Low),
        PatternSpec::new(SquareWave, 800.0, 600.0, 8)
            .with_noise(10.0)
            .with_intensity(Low),
        PatternSpec::new(SquareWave, 1800.0, 1700.0, 12)
            .with_noise(15.0)
            .with_intensity(High),
        PatternSpec::new(RampUp, 1200.0, 800.0, 20)
            .with_noise(5.0)
            .with_intensity(High),
        PatternSpec::new(SpikeTrain, 600.0, 1200.0, 10)
            .with_noise(10.0)
            .with_intensity(Low),
        PatternSpec::new(PlateauShift, 400.0, 1100.0, 4)
            .with_noise(8.0)
            .with_intensity(Low),
        PatternSpec::new(NoiseFlat, 1000.0, 300.0, 4)
            .with_noise(10.0)
            .with_intensity(Low),
    ]
}

/// Pattern held back from [`standard_palette`] to play the role of a newly
/// emerging workload.
pub fn novel_pattern() -> PatternSpec {
    PatternSpec::new(Family::RampDown, 1000.0, 450.0, 4)
        .with_noise(8.0)
        .with_intensity(Intensity::Low)
}

/// Renders a dataset as scheduler records plus node telemetry, one
/// dedicated node per job and `samples_per_window` equal readings per 10 s
/// window (1 reproduces the profile values exactly after ingest).
pub fn render_telemetry(
    ds: &SynthDataset,
    samples_per_window: usize,
) -> Result<(Vec<ingest::JobRecord>, Vec<ingest::PowerSample>)> {
    if samples_per_window == 0 || samples_per_window > ingest::STEP_SECONDS as usize {
        return Err(Error::config("samples_per_window must be in 1..=10"));
    }
    let stride = ingest::STEP_SECONDS / samples_per_window as i64;
    let mut jobs = Vec::with_capacity(ds.profiles.len());
    let mut samples = Vec::new();
    for p in &ds.profiles {
        let host = format!("{}-n0", p.job_id);
        jobs.push(ingest::JobRecord {
            job_id: p.job_id.clone(),
            start: p.t0,
            end: p.t0 + ingest::STEP_SECONDS * p.len() as i64,
            nodes: vec![host.clone()],
            project: None,
            domain: p.domain.clone(),
        });
        for (k, &v) in p.values.iter().enumerate() {
            for j in 0..samples_per_window as i64 {
                samples.push(ingest::PowerSample {
                    timestamp: p.t0 + ingest::STEP_SECONDS * k as i64 + j * stride,
                    hostname: host.clone(),
                    input_power: v,
                });
            }
        }
    }
    Ok((jobs, samples))
}
