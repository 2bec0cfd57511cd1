//! The fixed-order 186-element feature vector and z-score standardization.
//!
//! Layout:
//!
//! | index      | content                                                     |
//! |------------|-------------------------------------------------------------|
//! | 0..4       | per-bin mean power (W)                                      |
//! | 4..8       | per-bin median power (W)                                    |
//! | 8..184     | swing counts / n, ordered (bin, lag, direction, range)      |
//! | 184        | whole-series mean power (W)                                 |
//! | 185        | length n (windows)                                          |

use std::io::{Read, Write};
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::JobProfile;

pub const NUM_BINS: usize = 4;
pub const LAGS: [usize; 2] = [1, 2];
pub const NUM_DIRECTIONS: usize = 2;

/// Swing magnitude ranges in watts, half-open `[lo, hi)`.
pub const SWING_RANGES: [(f64, f64); 11] = [
    (25.0, 50.0),
    (50.0, 100.0),
    (100.0, 200.0),
    (200.0, 300.0),
    (300.0, 400.0),
    (400.0, 500.0),
    (500.0, 700.0),
    (700.0, 1000.0),
    (1000.0, 1500.0),
    (1500.0, 2000.0),
    (2000.0, 3000.0),
];
pub const NUM_RANGES: usize = SWING_RANGES.len();

pub const SWING_OFFSET: usize = 2 * NUM_BINS;
pub const NUM_SWING_FEATURES: usize = NUM_BINS * LAGS.len() * NUM_DIRECTIONS * NUM_RANGES;
pub const MEAN_POWER_INDEX: usize = SWING_OFFSET + NUM_SWING_FEATURES;
pub const LENGTH_INDEX: usize = MEAN_POWER_INDEX + 1;
pub const NUM_FEATURES: usize = LENGTH_INDEX + 1;

const _: () = assert!(NUM_FEATURES == 186);

pub const MIN_SERIES_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Rising = 0,
    Falling = 1,
}

/// Ordered, non-overlapping swing ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct SwingRangeTable {
    ranges: Vec<(f64, f64)>,
}

impl Default for SwingRangeTable {
    fn default() -> Self {
        Self {
            ranges: SWING_RANGES.to_vec(),
        }
    }
}

impl SwingRangeTable {
    pub fn new(ranges: Vec<(f64, f64)>) -> Result<Self> {
        for (i, &(lo, hi)) in ranges.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::config(format!("range {i} [{lo},{hi}) is empty")));
            }
            if i > 0 && ranges[i - 1].1 > lo {
                return Err(Error::config(format!("range {i} overlaps its predecessor")));
            }
        }
        Ok(Self { ranges })
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    /// Index of the range containing `magnitude`, if any.
    pub fn locate(&self, magnitude: f64) -> Option<usize> {
        let i = self.ranges.partition_point(|r| r.1 <= magnitude);
        match self.ranges.get(i) {
            Some(&(lo, _)) if magnitude >= lo => Some(i),
            _ => None,
        }
    }
}

/// Splits `n` windows into four contiguous bins; the first `n % 4` bins
/// get one extra window.
pub fn split_bins(n: usize) -> Result<[Range<usize>; NUM_BINS]> {
    if n < MIN_SERIES_LEN {
        return Err(Error::data(format!(
            "profile too short: {n} windows < {MIN_SERIES_LEN}"
        )));
    }
    let base = n / NUM_BINS;
    let rem = n % NUM_BINS;
    let mut start = 0;
    Ok(std::array::from_fn(|b| {
        let len = base + usize::from(b < rem);
        let r = start..start + len;
        start += len;
        r
    }))
}

/// Raw swing counts indexed `[bin][direction][range]`.
pub type SwingCounts = Vec<[Vec<u32>; NUM_DIRECTIONS]>;

pub fn swing_counts(
    series: &[f64],
    lag: usize,
    bins: &[Range<usize>; NUM_BINS],
    table: &SwingRangeTable,
) -> SwingCounts {
    let mut counts: SwingCounts = (0..NUM_BINS)
        .map(|_| [vec![0; table.len()], vec![0; table.len()]])
        .collect();
    if series.len() <= lag {
        return counts;
    }
    let mut bin = 0;
    for t in 0..series.len() - lag {
        while !bins[bin].contains(&t) {
            bin += 1;
        }
        let delta = series[t + lag] - series[t];
        let dir = if delta > 0.0 {
            Direction::Rising
        } else if delta < 0.0 {
            Direction::Falling
        } else {
            continue;
        };
        if let Some(r) = table.locate(delta.abs()) {
            counts[bin][dir as usize][r] += 1;
        }
    }
    counts
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub job_id: String,
    pub values: Vec<f64>,
}

pub fn extract_features(profile: &JobProfile) -> Result<FeatureVector> {
    let series = &profile.values;
    let n = series.len();
    let bins = split_bins(n)?;
    let table = SwingRangeTable::default();
    let mut values = Vec::with_capacity(NUM_FEATURES);

    values.extend(bins.iter().map(|b| mean(&series[b.clone()])));
    values.extend(bins.iter().map(|b| median(&series[b.clone()])));

    let per_lag: Vec<SwingCounts> = LAGS
        .iter()
        .map(|&lag| swing_counts(series, lag, &bins, &table))
        .collect();
    let nf = n as f64;
    for bin in 0..NUM_BINS {
        for counts in &per_lag {
            for dir in &counts[bin] {
                values.extend(dir.iter().map(|&c| c as f64 / nf));
            }
        }
    }

    values.push(mean(series));
    values.push(nf);
    debug_assert_eq!(values.len(), NUM_FEATURES);
    Ok(FeatureVector {
        job_id: profile.job_id.clone(),
        values,
    })
}

/// Extracts features for many profiles in parallel; output rows are
/// sorted by job_id.
pub fn extract_all(profiles: &[JobProfile]) -> Result<Vec<FeatureVector>> {
    let mut rows = profiles
        .par_iter()
        .map(extract_features)
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.job_id.cmp(&b.job_id));
    Ok(rows)
}

fn range_label(lo: f64, hi: f64) -> String {
    format!("{}_{}", lo as u32, hi as u32)
}

/// Canonical human-readable names, index-aligned with the vector.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(NUM_FEATURES);
    for b in 1..=NUM_BINS {
        names.push(format!("{b}_mean_input_power"));
    }
    for b in 1..=NUM_BINS {
        names.push(format!("{b}_median_input_power"));
    }
    for b in 1..=NUM_BINS {
        for lag in LAGS {
            let lag_tag = if lag == 1 {
                String::new()
            } else {
                lag.to_string()
            };
            for dir in ["p", "n"] {
                for (lo, hi) in SWING_RANGES {
                    names.push(format!("{b}_sfq{lag_tag}{dir}_{}", range_label(lo, hi)));
                }
            }
        }
    }
    names.push("mean_power".into());
    names.push("length".into());
    names
}

/// CSV column names: `f000` .. `f185`.
pub fn column_names() -> Vec<String> {
    (0..NUM_FEATURES).map(|i| format!("f{i:03}")).collect()
}

/// Index of the swing feature for `(bin, lag position, direction, range)`.
pub fn swing_index(bin: usize, lag_pos: usize, dir: Direction, range: usize) -> usize {
    SWING_OFFSET
        + ((bin * LAGS.len() + lag_pos) * NUM_DIRECTIONS + dir as usize) * NUM_RANGES
        + range
}

/// Sum of all length-normalized swing features.
pub fn swing_activity(values: &[f64]) -> f64 {
    values[SWING_OFFSET..MEAN_POWER_INDEX].iter().sum()
}

pub fn write_feature_csv<W: Write>(writer: W, rows: &[FeatureVector]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["job_id".to_string()];
    header.extend(column_names());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = Vec::with_capacity(NUM_FEATURES + 1);
        rec.push(r.job_id.clone());
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `job_id,<cols...>` matrix of any width.
pub fn read_matrix_csv<R: Read>(reader: R, expected_width: usize) -> Result<Vec<FeatureVector>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let width = rdr.headers()?.len();
    if width != expected_width + 1 {
        return Err(Error::Dimension {
            expected: expected_width,
            got: width.saturating_sub(1),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let values = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad number {s:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != expected_width {
            return Err(Error::Parse {
                line,
                msg: "row width mismatch".into(),
            });
        }
        out.push(FeatureVector {
            job_id: rec[0].to_string(),
            values,
        });
    }
    Ok(out)
}

pub fn read_feature_csv<R: Read>(reader: R) -> Result<Vec<FeatureVector>> {
    read_matrix_csv(reader, NUM_FEATURES)
}

pub fn save_feature_csv(path: impl AsRef<std::path::Path>, rows: &[FeatureVector]) -> Result<()> {
    let f = std::fs::File::create(path.as_ref())?;
    write_feature_csv(std::io::BufWriter::new(f), rows)
}

pub fn load_feature_csv(path: impl AsRef<std::path::Path>) -> Result<Vec<FeatureVector>> {
    read_feature_csv(std::fs::File::open(path.as_ref())?)
}

/// Per-feature z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Scaler {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::data(format!(
                "scaler needs >= 2 rows, got {}",
                rows.len()
            )));
        }
        let width = rows[0].len();
        if let Some(r) = rows.iter().find(|r| r.len() != width) {
            return Err(Error::Dimension {
                expected: width,
                got: r.len(),
            });
        }
        let n = rows.len() as f64;
        let mut means = vec![0.0; width];
        for r in rows {
            for (m, v) in means.iter_mut().zip(r) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut stds = vec![0.0; width];
        for r in rows {
            for ((s, v), m) in stds.iter_mut().zip(r).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        stds.iter_mut().for_each(|s| *s = (*s / n).sqrt());
        Ok(Self { means, stds })
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn is_degenerate(&self, feature: usize) -> bool {
        self.stds[feature] <= 1e-12 * self.means[feature].abs().max(1.0)
    }

    pub fn degenerate(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.is_degenerate(i)).collect()
    }

    pub fn apply(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: row.len(),
            });
        }
        Ok(row
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if self.is_degenerate(i) {
                    0.0
                } else {
                    (v - self.means[i]) / self.stds[i]
                }
            })
            .collect())
    }

    pub fn apply_all(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|r| self.apply(r)).collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(i, z)| {
                if self.is_degenerate(i) {
                    self.means[i]
                } else {
                    z * self.stds[i] + self.means[i]
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile(values: Vec<f64>) -> JobProfile {
        JobProfile::new("t", 0, 1, values)
    }

    #[test]
    fn feature_count_decomposition() {
        assert_eq!(11 * 2 * 2 * 4 + 4 + 4 + 1 + 1, 186);
        assert_eq!(NUM_FEATURES, 186);
        assert_eq!(feature_names().len(), 186);
        assert_eq!(column_names()[185], "f185");
    }

    #[test]
    fn bins_remainder_rule() {
        let lens = |n| split_bins(n).unwrap().map(|r| r.len());
        assert_eq!(lens(10), [3, 3, 2, 2]);
        assert_eq!(lens(8), [2, 2, 2, 2]);
        assert_eq!(lens(11), [3, 3, 3, 2]);
        assert!(split_bins(7).is_err());
        let b = split_bins(13).unwrap();
        assert_eq!(b[0].start, 0);
        assert_eq!(b[3].end, 13);
        for w in b.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }

    #[test]
    fn range_lookup_half_open() {
        let t = SwingRangeTable::default();
        assert_eq!(t.locate(24.999), None);
        assert_eq!(t.locate(25.0), Some(0));
        assert_eq!(t.locate(50.0), Some(1));
        assert_eq!(t.locate(250.0), Some(3));
        assert_eq!(t.locate(2999.0), Some(10));
        assert_eq!(t.locate(3000.0), None);
        assert!(SwingRangeTable::new(vec![(0.0, 10.0), (5.0, 20.0)]).is_err());
    }

    #[test]
    fn constant_series_has_no_swings() {
        let s = vec![100.0; 12];
        let bins = split_bins(12).unwrap();
        for lag in LAGS {
            let c = swing_counts(&s, lag, &bins, &SwingRangeTable::default());
            assert!(c.iter().flatten().flatten().all(|&x| x == 0));
        }
    }

    #[test]
    fn single_bump_lag_one_and_two() {
        let s = vec![100.0, 230.0, 100.0, 100.0, 100.0, 100.0, 100.0, 100.0];
        let bins = split_bins(8).unwrap();
        let t = SwingRangeTable::default();
        let c1 = swing_counts(&s, 1, &bins, &t);
        // +130 at t=0 (bin 0) and -130 at t=1 (bin 0)
        let total: u32 = c1.iter().flatten().flatten().sum();
        assert_eq!(total, 2);
        assert_eq!(c1[0][Direction::Rising as usize][2], 1);
        assert_eq!(c1[0][Direction::Falling as usize][2], 1);
        let c2 = swing_counts(&s, 2, &bins, &t);
        let total: u32 = c2.iter().flatten().flatten().sum();
        assert_eq!(total, 1);
        assert_eq!(c2[0][Direction::Falling as usize][2], 1);
    }

    #[test]
    fn flat_profile_features() {
        let f = extract_features(&profile(vec![500.0; 40])).unwrap();
        assert_eq!(f.values.len(), 186);
        assert!(f.values[..8].iter().all(|&v| v == 500.0));
        assert!(f.values[8..184].iter().all(|&v| v == 0.0));
        assert_eq!(f.values[184], 500.0);
        assert_eq!(f.values[185], 40.0);
    }

    #[test]
    fn square_wave_features() {
        // deltas: 0, -600, 0, +600, 0, -600, 0 at t = 0..6; bins [0,1] [2,3] [4,5] [6,7]
        let s = vec![1100.0, 1100.0, 500.0, 500.0, 1100.0, 1100.0, 500.0, 500.0];
        let f = extract_features(&profile(s)).unwrap();
        assert_eq!(&f.values[..4], &[1100.0, 500.0, 1100.0, 500.0]);
        let r = 6; // [500, 700)
        let get = |bin, lag, dir| f.values[swing_index(bin, lag, dir, r)];
        assert_eq!(get(0, 0, Direction::Falling), 1.0 / 8.0);
        assert_eq!(get(1, 0, Direction::Rising), 1.0 / 8.0);
        assert_eq!(get(2, 0, Direction::Falling), 1.0 / 8.0);
        assert_eq!(get(0, 0, Direction::Rising), 0.0);
        assert_eq!(get(3, 0, Direction::Falling), 0.0);
        // lag 2: -600, -600, +600, +600, -600, -600 at t = 0..5
        assert_eq!(get(0, 1, Direction::Falling), 2.0 / 8.0);
        assert_eq!(get(1, 1, Direction::Rising), 2.0 / 8.0);
        assert_eq!(get(2, 1, Direction::Falling), 2.0 / 8.0);
        assert_eq!(f.values[184], 800.0);
        assert_eq!(swing_activity(&f.values), 9.0 / 8.0);
    }

    #[test]
    fn even_bin_median_is_mid_mean() {
        let s = vec![1.0, 3.0, 10.0, 20.0, 5.0, 7.0, 0.0, 100.0];
        let f = extract_features(&profile(s)).unwrap();
        assert_eq!(&f.values[4..8], &[2.0, 15.0, 6.0, 50.0]);
    }

    #[test]
    fn names_follow_index_layout() {
        let names = feature_names();
        assert_eq!(names[0], "1_mean_input_power");
        assert_eq!(names[4], "1_median_input_power");
        assert_eq!(names[8], "1_sfqp_25_50");
        assert_eq!(
            names[swing_index(0, 0, Direction::Falling, 0)],
            "1_sfqn_25_50"
        );
        assert_eq!(
            names[swing_index(0, 1, Direction::Rising, 0)],
            "1_sfq2p_25_50"
        );
        assert_eq!(
            names[swing_index(3, 0, Direction::Rising, 9)],
            "4_sfqp_1500_2000"
        );
        assert_eq!(names[184], "mean_power");
        assert_eq!(names[185], "length");
    }

    #[test]
    fn scaler_two_rows() {
        let s = Scaler::fit(&[vec![0.0, 7.0], vec![2.0, 7.0]]).unwrap();
        assert_eq!(s.apply(&[0.0, 7.0]).unwrap(), vec![-1.0, 0.0]);
        assert_eq!(s.apply(&[2.0, 7.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(s.degenerate(), vec![1]);
        assert!(Scaler::fit(&[vec![1.0]]).is_err());
        assert!(s.apply(&[1.0]).is_err());
    }

    #[test]
    fn feature_csv_roundtrip() {
        let rows =
            vec![extract_features(&profile((0..9).map(|i| i as f64 * 33.3).collect())).unwrap()];
        let mut buf = Vec::new();
        write_feature_csv(&mut buf, &rows).unwrap();
        let head = String::from_utf8(buf.clone()).unwrap();
        assert!(head.starts_with("job_id,f000,f001"));
        assert_eq!(read_feature_csv(buf.as_slice()).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn swing_totals_bounded(values in prop::collection::vec(0.0f64..3000.0, 8..80)) {
            let n = values.len();
            let bins = split_bins(n).unwrap();
            let t = SwingRangeTable::default();
            for lag in LAGS {
                let total: u32 = swing_counts(&values, lag, &bins, &t).iter().flatten().flatten().sum();
                prop_assert!(total as usize <= n - lag);
            }
            let f = extract_features(&profile(values)).unwrap();
            prop_assert_eq!(f.values.len(), 186);
            prop_assert!(f.values[8..184].iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn scaling_maps_ranges(values in prop::collection::vec(0u32..20, 8..40)) {
            // steps of 30 W land in [25,50) and multiples; doubling maps 30->60 in [50,100)
            let base: Vec<f64> = values.iter().map(|v| 1000.0 + 30.0 * (*v % 2) as f64).collect();
            let scaled: Vec<f64> = base.iter().map(|v| v * 2.0).collect();
            let a = extract_features(&profile(base)).unwrap();
            let b = extract_features(&profile(scaled)).unwrap();
            for i in 0..8 {
                prop_assert_eq!(b.values[i], 2.0 * a.values[i]);
            }
            for bin in 0..4 {
                for lag in 0..2 {
                    for dir in [Direction::Rising, Direction::Falling] {
                        prop_assert_eq!(
                            a.values[swing_index(bin, lag, dir, 0)],
                            b.values[swing_index(bin, lag, dir, 1)]
                        );
                    }
                }
            }
        }

        #[test]
        fn scaler_standardizes(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..30)) {
            let s = Scaler::fit(&rows).unwrap();
            let z = s.apply_all(&rows).unwrap();
            for j in 0..3 {
                let m: f64 = z.iter().map(|r| r[j]).sum::<f64>() / z.len() as f64;
                prop_assert!(m.abs() < 1e-9);
                if !s.is_degenerate(j) {
                    let v: f64 = z.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / z.len() as f64;
                    prop_assert!((v.sqrt() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
