//! Telemetry and scheduler ingestion: per-node 1 Hz input power plus job
//! allocation records become job-level 10 s profiles, normalized per node.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aggregation window length in seconds.
pub const STEP_SECONDS: i64 = 10;

/// Jobs with fewer windows than this are dropped.
pub const MIN_PROFILE_LEN: usize = 8;

pub const TELEMETRY_HEADER: [&str; 3] = ["timestamp", "hostname", "input_power_w"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub timestamp: i64,
    pub hostname: String,
    pub input_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub start: i64,
    pub end: i64,
    pub nodes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

impl JobRecord {
    pub fn validate(&self) -> Result<()> {
        if self.end <= self.start {
            return Err(Error::data(format!(
                "job {}: end {} must be after start {}",
                self.job_id, self.end, self.start
            )));
        }
        if self.nodes.is_empty() {
            return Err(Error::data(format!("job {}: empty node list", self.job_id)));
        }
        Ok(())
    }
}

/// Job-level power profile: mean per-node input power in 10 s windows
/// aligned to the job start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobProfile {
    pub job_id: String,
    pub t0: i64,
    pub step: i64,
    pub node_count: usize,
    pub domain: Option<String>,
    pub values: Vec<f64>,
}

impl JobProfile {
    pub fn new(job_id: impl Into<String>, t0: i64, node_count: usize, values: Vec<f64>) -> Self {
        Self {
            job_id: job_id.into(),
            t0,
            step: STEP_SECONDS,
            node_count,
            domain: None,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.step != STEP_SECONDS {
            return Err(Error::data(format!(
                "profile {}: step {} != {STEP_SECONDS}",
                self.job_id, self.step
            )));
        }
        if self.values.len() < MIN_PROFILE_LEN {
            return Err(Error::data(format!(
                "profile {}: {} windows < {MIN_PROFILE_LEN}",
                self.job_id,
                self.values.len()
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::data(format!(
                "profile {}: invalid power value {v}",
                self.job_id
            )));
        }
        Ok(())
    }
}

/// Reads the telemetry CSV (`timestamp,hostname,input_power_w`).
pub fn parse_telemetry(path: impl AsRef<Path>) -> Result<Vec<PowerSample>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_telemetry(file)
}

pub fn read_telemetry<R: Read>(reader: R) -> Result<Vec<PowerSample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(TELEMETRY_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "bad telemetry header {:?}, expected {}",
                headers.iter().collect::<Vec<_>>(),
                TELEMETRY_HEADER.join(",")
            ),
        });
    }

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse {
                line,
                msg: format!("malformed row ({e})"),
            }
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        if record.len() != 3 {
            return Err(bad("malformed row"));
        }
        let timestamp: i64 = record[0].parse().map_err(|_| bad("bad timestamp"))?;
        if timestamp < 0 {
            return Err(bad("negative timestamp"));
        }
        let hostname = record[1].to_string();
        if hostname.is_empty() {
            return Err(bad("empty hostname"));
        }
        let input_power: f64 = record[2].parse().map_err(|_| bad("bad power value"))?;
        if !input_power.is_finite() {
            return Err(bad("non-finite power"));
        }
        if input_power < 0.0 {
            return Err(bad("negative power"));
        }
        out.push(PowerSample {
            timestamp,
            hostname,
            input_power,
        });
    }
    Ok(out)
}

pub fn write_telemetry<W: Write>(writer: W, samples: &[PowerSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TELEMETRY_HEADER)?;
    for s in samples {
        w.write_record([
            s.timestamp.to_string(),
            s.hostname.clone(),
            s.input_power.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads scheduler records, one JSON object per line.
pub fn parse_jobs(path: impl AsRef<Path>) -> Result<Vec<JobRecord>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_jobs(BufReader::new(file))
}

pub fn read_jobs<R: BufRead>(reader: R) -> Result<Vec<JobRecord>> {
    let mut out: Vec<JobRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i as u64 + 1;
        let job: JobRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("malformed job record ({e})"),
        })?;
        job.validate().map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if !seen.insert(job.job_id.clone()) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("duplicate job_id {}", job.job_id),
            });
        }
        out.push(job);
    }
    Ok(out)
}

/// Averages sorted `(timestamp, watts)` samples into 10 s windows over
/// `[t0, t1)`. Only full windows are produced. Empty windows inherit the
/// previous value; `None` if the first window is empty.
pub fn aggregate_10s(samples: &[(i64, f64)], t0: i64, t1: i64) -> Option<Vec<f64>> {
    assert!(t1 > t0, "aggregate_10s requires t1 > t0");
    let windows = ((t1 - t0) / STEP_SECONDS) as usize;
    let mut sums = vec![0.0f64; windows];
    let mut counts = vec![0usize; windows];
    for &(ts, w) in samples {
        if ts < t0 {
            continue;
        }
        let k = ((ts - t0) / STEP_SECONDS) as usize;
        if k >= windows {
            break;
        }
        sums[k] += w;
        counts[k] += 1;
    }
    let mut out = Vec::with_capacity(windows);
    for k in 0..windows {
        if counts[k] > 0 {
            out.push(sums[k] / counts[k] as f64);
        } else {
            out.push(*out.last()?);
        }
    }
    Some(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    MissingNode,
    LeadingGap,
    TooShort,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub jobs_in: usize,
    pub profiles_out: usize,
    pub dropped: Vec<(String, DropReason)>,
}

impl IngestSummary {
    pub fn count(&self, reason: DropReason) -> usize {
        self.dropped.iter().filter(|(_, r)| *r == reason).count()
    }
}

/// Joins job allocations with node telemetry. Output is sorted by job_id
/// and independent of the order of `telemetry`.
pub fn build_profiles(
    jobs: &[JobRecord],
    telemetry: &[PowerSample],
) -> (Vec<JobProfile>, IngestSummary) {
    let mut by_host: HashMap<&str, Vec<(i64, f64)>> = HashMap::new();
    for s in telemetry {
        by_host
            .entry(s.hostname.as_str())
            .or_default()
            .push((s.timestamp, s.input_power));
    }
    for series in by_host.values_mut() {
        series.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    }

    let mut sorted: Vec<&JobRecord> = jobs.iter().collect();
    sorted.sort_by(|a, b| a.job_id.cmp(&b.job_id));

    let results: Vec<std::result::Result<JobProfile, (String, DropReason)>> = sorted
        .par_iter()
        .map(|job| profile_for_job(job, &by_host))
        .collect();

    let mut summary = IngestSummary {
        jobs_in: jobs.len(),
        ..Default::default()
    };
    let mut profiles = Vec::new();
    for r in results {
        match r {
            Ok(p) => profiles.push(p),
            Err((id, reason)) => {
                log::info!("dropping job {id}: {reason:?}");
                summary.dropped.push((id, reason));
            }
        }
    }
    summary.profiles_out = profiles.len();
    (profiles, summary)
}

fn profile_for_job(
    job: &JobRecord,
    by_host: &HashMap<&str, Vec<(i64, f64)>>,
) -> std::result::Result<JobProfile, (String, DropReason)> {
    let drop = |r| (job.job_id.clone(), r);
    let nodes: BTreeSet<&str> = job.nodes.iter().map(String::as_str).collect();
    let windows = ((job.end - job.start) / STEP_SECONDS) as usize;
    if windows < MIN_PROFILE_LEN {
        return Err(drop(DropReason::TooShort));
    }

    let mut per_node: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for node in &nodes {
        let series = by_host.get(node).ok_or(drop(DropReason::MissingNode))?;
        let lo = series.partition_point(|s| s.0 < job.start);
        let hi = series.partition_point(|s| s.0 < job.end);
        if lo == hi {
            return Err(drop(DropReason::MissingNode));
        }
        let agg = aggregate_10s(&series[lo..hi], job.start, job.end)
            .ok_or(drop(DropReason::LeadingGap))?;
        per_node.insert(node, agg);
    }

    let n = nodes.len() as f64;
    let values = (0..windows)
        .map(|k| per_node.values().map(|s| s[k]).sum::<f64>() / n)
        .collect();
    Ok(JobProfile {
        job_id: job.job_id.clone(),
        t0: job.start,
        step: STEP_SECONDS,
        node_count: nodes.len(),
        domain: job.domain.clone(),
        values,
    })
}

pub fn write_profiles<W: Write>(mut writer: W, profiles: &[JobProfile]) -> Result<()> {
    for p in profiles {
        serde_json::to_writer(&mut writer, p)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_profiles<R: BufRead>(reader: R) -> Result<Vec<JobProfile>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: JobProfile = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i as u64 + 1,
            msg: format!("malformed profile ({e})"),
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<JobProfile>> {
    read_profiles(BufReader::new(std::fs::File::open(path.as_ref())?))
}

pub fn save_profiles(path: impl AsRef<Path>, profiles: &[JobProfile]) -> Result<()> {
    let f = std::fs::File::create(path.as_ref())?;
    write_profiles(std::io::BufWriter::new(f), profiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(ts: i64, host: &str, w: f64) -> PowerSample {
        PowerSample {
            timestamp: ts,
            hostname: host.into(),
            input_power: w,
        }
    }

    fn job(id: &str, start: i64, end: i64, nodes: &[&str]) -> JobRecord {
        JobRecord {
            job_id: id.into(),
            start,
            end,
            nodes: nodes.iter().map(|s| s.to_string()).collect(),
            project: None,
            domain: None,
        }
    }

    #[test]
    fn parses_single_row() {
        let csv = "timestamp,hostname,input_power_w\n100,node1,500.0\n";
        let s = read_telemetry(csv.as_bytes()).unwrap();
        assert_eq!(s, vec![sample(100, "node1", 500.0)]);
    }

    #[test]
    fn header_only_is_empty() {
        let s = read_telemetry("timestamp,hostname,input_power_w\n".as_bytes()).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn negative_power_reports_line() {
        let csv = "timestamp,hostname,input_power_w\n100,node1,-5\n";
        let err = read_telemetry(csv.as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "negative power, line 2");
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "timestamp,hostname,input_power_w\n1,a,2\n2,a\n";
        let err = read_telemetry(csv.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let csv = "timestamp,hostname,input_power_w\nx,a,2\n";
        assert!(matches!(
            read_telemetry(csv.as_bytes()).unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn wrong_header_rejected() {
        assert!(read_telemetry("ts,host,w\n".as_bytes()).is_err());
    }

    #[test]
    fn aggregate_constant() {
        let s: Vec<_> = (0..30).map(|t| (t, 500.0)).collect();
        assert_eq!(aggregate_10s(&s, 0, 30).unwrap(), vec![500.0; 3]);
    }

    #[test]
    fn aggregate_mean_of_ramp() {
        let s: Vec<_> = (0..10).map(|t| (t, t as f64)).collect();
        assert_eq!(aggregate_10s(&s, 0, 10).unwrap(), vec![4.5]);
    }

    #[test]
    fn aggregate_partial_window_uses_present_values() {
        let s = vec![(0, 100.0), (2, 200.0), (4, 300.0), (6, 400.0), (8, 500.0)];
        assert_eq!(aggregate_10s(&s, 0, 10).unwrap(), vec![300.0]);
    }

    #[test]
    fn aggregate_gap_policy() {
        // window 1 empty -> carries window 0
        let s = vec![(0, 10.0), (25, 30.0)];
        assert_eq!(aggregate_10s(&s, 0, 30).unwrap(), vec![10.0, 10.0, 30.0]);
        // leading gap
        let s = vec![(15, 10.0)];
        assert_eq!(aggregate_10s(&s, 0, 30), None);
    }

    #[test]
    fn aggregate_drops_trailing_partial_window() {
        let s: Vec<_> = (0..35).map(|t| (t, 1.0)).collect();
        assert_eq!(aggregate_10s(&s, 0, 35).unwrap().len(), 3);
    }

    fn telemetry_for(host: &str, windows: &[f64], start: i64) -> Vec<PowerSample> {
        windows
            .iter()
            .enumerate()
            .flat_map(|(k, w)| (0..10).map(move |s| sample(start + 10 * k as i64 + s, host, *w)))
            .collect()
    }

    #[test]
    fn two_node_mean() {
        let mut t = telemetry_for("a", &[100.0, 200.0, 100.0, 200.0, 1.0, 1.0, 1.0, 1.0], 0);
        t.extend(telemetry_for(
            "b",
            &[300.0, 400.0, 300.0, 400.0, 3.0, 3.0, 3.0, 3.0],
            0,
        ));
        let (p, s) = build_profiles(&[job("j", 0, 80, &["a", "b"])], &t);
        assert_eq!(s.profiles_out, 1);
        assert_eq!(p[0].node_count, 2);
        assert_eq!(&p[0].values[..4], &[200.0, 300.0, 200.0, 300.0]);
        assert_eq!(&p[0].values[4..], &[2.0; 4]);
    }

    #[test]
    fn single_node_identity() {
        let w = [50.0, 60.0, 70.0, 80.0, 90.0, 100.0, 110.0, 120.0];
        let t = telemetry_for("a", &w, 1000);
        let (p, _) = build_profiles(&[job("j", 1000, 1080, &["a"])], &t);
        assert_eq!(p[0].values, w.to_vec());
        assert_eq!(p[0].t0, 1000);
    }

    #[test]
    fn short_job_dropped() {
        let t = telemetry_for("a", &[1.0; 4], 0);
        let (p, s) = build_profiles(&[job("j", 0, 40, &["a"])], &t);
        assert!(p.is_empty());
        assert_eq!(s.dropped, vec![("j".to_string(), DropReason::TooShort)]);
    }

    #[test]
    fn missing_node_and_leading_gap_dropped() {
        let mut t = telemetry_for("a", &[1.0; 8], 0);
        t.extend(
            telemetry_for("b", &[1.0; 8], 0)
                .into_iter()
                .filter(|s| s.timestamp >= 10),
        );
        let (p, s) = build_profiles(
            &[
                job("j1", 0, 80, &["a", "zz"]),
                job("j2", 0, 80, &["a", "b"]),
            ],
            &t,
        );
        assert!(p.is_empty());
        assert_eq!(s.count(DropReason::MissingNode), 1);
        assert_eq!(s.count(DropReason::LeadingGap), 1);
    }

    #[test]
    fn profiles_roundtrip_jsonl() {
        let p = vec![JobProfile::new("a", 0, 1, vec![1.5; 8])];
        let mut buf = Vec::new();
        write_profiles(&mut buf, &p).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.starts_with("{\"job_id\":\"a\",\"t0\":0,\"step\":10,\"node_count\":1"));
        assert_eq!(read_profiles(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn jobs_jsonl_parsing() {
        let src = r#"{"job_id":"1","start":0,"end":100,"nodes":["a"]}
{"job_id":"2","start":0,"end":100,"nodes":["a","b"],"project":"p","domain":"bio"}
"#;
        let jobs = read_jobs(src.as_bytes()).unwrap();
        assert_eq!(jobs.len(), 2);
        assert_eq!(jobs[1].domain.as_deref(), Some("bio"));
        let dup = "{\"job_id\":\"1\",\"start\":0,\"end\":10,\"nodes\":[\"a\"]}\n".repeat(2);
        assert!(read_jobs(dup.as_bytes()).is_err());
        let bad = "{\"job_id\":\"1\",\"start\":10,\"end\":10,\"nodes\":[\"a\"]}\n";
        assert!(read_jobs(bad.as_bytes()).is_err());
    }
}
