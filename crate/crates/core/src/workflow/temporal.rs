//! Future-data evaluation on a calendar of 30-day months.
//!
//! For train length `m` and anchor month `a`, the classifier is trained on
//! jobs submitted in months `[a, a+m)`; classes with at least
//! `min_class_samples` jobs there are known. It is then tested on the
//! horizon immediately after the training window: closed accuracy over
//! known-class jobs, open accuracy with the other jobs as unknowns. Anchors
//! slide by one month while the window and horizon fit the calendar.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::openset::{evaluate, train_closed, ClassifierConfig};
use crate::synth::MONTH_SECONDS;

pub const DAY_SECONDS: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalConfig {
    /// Calendar start; defaults to the earliest timestamp.
    pub start: Option<i64>,
    /// Calendar length in months; defaults to the span of the data.
    pub months: Option<u32>,
    pub train_months: Vec<u32>,
    pub horizons_days: Vec<u32>,
    pub min_class_samples: usize,
    pub classifier: ClassifierConfig,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            start: None,
            months: None,
            train_months: vec![1, 3, 6, 9, 11],
            horizons_days: vec![7, 30, 90],
            min_class_samples: 2,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalSample {
    pub job_id: String,
    pub latent: Vec<f64>,
    pub class_id: u32,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train_months: u32,
    pub anchor_month: u32,
    pub horizon_days: u32,
    pub train_start: i64,
    pub train_end: i64,
    pub test_start: i64,
    pub test_end: i64,
    pub n_train: usize,
    pub n_test_known: usize,
    pub n_test_unknown: usize,
    pub known_classes: Vec<u32>,
    /// Latest training timestamp and earliest test timestamp actually used.
    pub last_train_ts: Option<i64>,
    pub first_test_ts: Option<i64>,
    pub closed_acc: Option<f64>,
    pub open_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalCell {
    pub train_months: u32,
    pub horizon_days: u32,
    /// Number of anchor positions that fit; 0 means NA.
    pub windows: usize,
    pub mean_closed_acc: Option<f64>,
    pub mean_open_acc: Option<f64>,
    pub mean_known_classes: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalReport {
    pub start: i64,
    pub months: u32,
    pub cells: Vec<TemporalCell>,
    pub splits: Vec<SplitRecord>,
}

impl TemporalReport {
    pub fn cell(&self, train_months: u32, horizon_days: u32) -> Option<&TemporalCell> {
        self.cells
            .iter()
            .find(|c| c.train_months == train_months && c.horizon_days == horizon_days)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "train_months",
            "horizon_days",
            "windows",
            "mean_closed_acc",
            "mean_open_acc",
            "mean_known_classes",
        ])?;
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        for c in &self.cells {
            w.write_record([
                c.train_months.to_string(),
                c.horizon_days.to_string(),
                c.windows.to_string(),
                fmt(c.mean_closed_acc),
                fmt(c.mean_open_acc),
                fmt(c.mean_known_classes),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn temporal_eval(samples: &[TemporalSample], cfg: &TemporalConfig) -> Result<TemporalReport> {
    if samples.is_empty() {
        return Err(Error::data("temporal evaluation needs samples"));
    }
    if cfg.train_months.is_empty() || cfg.horizons_days.is_empty() {
        return Err(Error::config(
            "train_months and horizons_days must be non-empty",
        ));
    }
    if cfg.train_months.contains(&0) || cfg.horizons_days.contains(&0) {
        return Err(Error::config("train months and horizons must be >= 1"));
    }
    let start = cfg.start.unwrap_or_else(|| {
        samples
            .iter()
            .map(|s| s.timestamp)
            .min()
            .expect("non-empty")
    });
    let last = samples
        .iter()
        .map(|s| s.timestamp)
        .max()
        .expect("non-empty");
    let months = cfg
        .months
        .unwrap_or_else(|| ((last - start) / MONTH_SECONDS + 1).max(1) as u32);
    let end = start + months as i64 * MONTH_SECONDS;

    let mut order: Vec<&TemporalSample> = samples.iter().collect();
    order.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.job_id.cmp(&b.job_id)));
    let window = |lo: i64, hi: i64| -> Vec<&TemporalSample> {
        order
            .iter()
            .copied()
            .filter(|s| s.timestamp >= lo && s.timestamp < hi)
            .collect()
    };

    // (m, anchor) pairs needed by at least one horizon
    let min_h = *cfg.horizons_days.iter().min().expect("non-empty") as i64 * DAY_SECONDS;
    let mut jobs: Vec<(u32, u32)> = Vec::new();
    for &m in &cfg.train_months {
        let mut a = 0u32;
        while start + (a + m) as i64 * MONTH_SECONDS + min_h <= end {
            jobs.push((m, a));
            a += 1;
        }
    }
    if jobs.is_empty() {
        let need =
            cfg.train_months.iter().min().copied().unwrap_or(1) as i64 * 30 + min_h / DAY_SECONDS;
        return Err(Error::data(format!(
            "insufficient span: calendar covers {} days; the smallest cell needs {need} days",
            months as i64 * 30
        )));
    }

    let models: Vec<
        Option<(
            crate::openset::ClassifierModel,
            BTreeSet<u32>,
            usize,
            Option<i64>,
        )>,
    > = jobs
        .par_iter()
        .map(|&(m, a)| {
            let lo = start + a as i64 * MONTH_SECONDS;
            let hi = lo + m as i64 * MONTH_SECONDS;
            let train = window(lo, hi);
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for s in &train {
                *counts.entry(s.class_id).or_insert(0) += 1;
            }
            let known: BTreeSet<u32> = counts
                .iter()
                .filter(|(_, &n)| n >= cfg.min_class_samples.max(2))
                .map(|(&c, _)| c)
                .collect();
            if known.len() < 2 {
                return Ok(None);
            }
            let used: Vec<&&TemporalSample> = train
                .iter()
                .filter(|s| known.contains(&s.class_id))
                .collect();
            let x: Vec<Vec<f64>> = used.iter().map(|s| s.latent.clone()).collect();
            let y: Vec<u32> = used.iter().map(|s| s.class_id).collect();
            let last_ts = used.iter().map(|s| s.timestamp).max();
            let model = train_closed(&x, &y, &cfg.classifier)?;
            Ok(Some((model, known, used.len(), last_ts)))
        })
        .collect::<Result<_>>()?;
    let trained: BTreeMap<(u32, u32), _> = jobs.iter().copied().zip(models).collect();

    let mut splits = Vec::new();
    let mut cells = Vec::new();
    for &m in &cfg.train_months {
        for &h in &cfg.horizons_days {
            let hs = h as i64 * DAY_SECONDS;
            let mut records = Vec::new();
            let mut a = 0u32;
            while start + (a + m) as i64 * MONTH_SECONDS + hs <= end {
                let train_start = start + a as i64 * MONTH_SECONDS;
                let train_end = train_start + m as i64 * MONTH_SECONDS;
                let (test_start, test_end) = (train_end, train_end + hs);
                let mut rec = SplitRecord {
                    train_months: m,
                    anchor_month: a,
                    horizon_days: h,
                    train_start,
                    train_end,
                    test_start,
                    test_end,
                    n_train: 0,
                    n_test_known: 0,
                    n_test_unknown: 0,
                    known_classes: Vec::new(),
                    last_train_ts: None,
                    first_test_ts: None,
                    closed_acc: None,
                    open_acc: None,
                };
                if let Some((model, known, n_train, last_ts)) = &trained[&(m, a)] {
                    let test = window(test_start, test_end);
                    rec.known_classes = known.iter().copied().collect();
                    rec.n_train = *n_train;
                    rec.last_train_ts = *last_ts;
                    rec.first_test_ts = test.iter().map(|s| s.timestamp).min();
                    if let (Some(l), Some(f)) = (rec.last_train_ts, rec.first_test_ts) {
                        if l >= f || l >= train_end || f < test_start {
                            return Err(Error::data(format!(
                                "train/test overlap at m={m} anchor={a} horizon={h}d"
                            )));
                        }
                    }
                    if !test.is_empty() {
                        let labeled: Vec<(Vec<f64>, Option<u32>)> = test
                            .iter()
                            .map(|s| {
                                (
                                    s.latent.clone(),
                                    known.contains(&s.class_id).then_some(s.class_id),
                                )
                            })
                            .collect();
                        rec.n_test_known = labeled.iter().filter(|(_, c)| c.is_some()).count();
                        rec.n_test_unknown = labeled.len() - rec.n_test_known;
                        let metrics = evaluate(model, model.threshold, &labeled)?;
                        rec.closed_acc = metrics.closed_acc;
                        rec.open_acc = metrics.open_acc;
                    }
                }
                records.push(rec);
                a += 1;
            }
            let evaluable: Vec<&SplitRecord> = records
                .iter()
                .filter(|r| !r.known_classes.is_empty())
                .collect();
            cells.push(TemporalCell {
                train_months: m,
                horizon_days: h,
                windows: records.len(),
                mean_closed_acc: mean(evaluable.iter().filter_map(|r| r.closed_acc)),
                mean_open_acc: mean(evaluable.iter().filter_map(|r| r.open_acc)),
                mean_known_classes: mean(evaluable.iter().map(|r| r.known_classes.len() as f64)),
            });
            splits.extend(records);
        }
    }
    Ok(TemporalReport {
        start,
        months,
        cells,
        splits,
    })
}
