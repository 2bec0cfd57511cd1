use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{euclidean, ClusterResult, NOISE};
use crate::error::{Error, Result};
use crate::features::{swing_activity, FeatureVector, MEAN_POWER_INDEX};
use crate::ingest::JobProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntensityLabel {
    CIH,
    CIL,
    MH,
    ML,
    NCH,
    NCL,
}

impl fmt::Display for IntensityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Constants of the intensity rule.
///
/// With `A` the class-mean swing activity (sum of the normalized swing
/// features), `P` the class-mean whole-series power and `F` the fraction of
/// the representative profile's windows at or above `plateau_power`:
///
/// * `A ≥ high_swing` → mixed
/// * `A ≤ low_swing` → compute-intensive if `F ≥ plateau_fraction`, else non-compute
/// * otherwise → compute-intensive if `F ≥ plateau_fraction`, else mixed
///
/// and high/low by `P ≥ power_split`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatalogParams {
    pub min_class_size: usize,
    pub power_split: f64,
    pub high_swing: f64,
    pub low_swing: f64,
    pub plateau_power: f64,
    pub plateau_fraction: f64,
}

impl Default for CatalogParams {
    fn default() -> Self {
        Self {
            min_class_size: 50,
            power_split: 1000.0,
            high_swing: 0.5,
            low_swing: 0.1,
            plateau_power: 1000.0,
            plateau_fraction: 0.6,
        }
    }
}

impl CatalogParams {
    pub fn classify(&self, activity: f64, mean_power: f64, plateau: f64) -> IntensityLabel {
        use IntensityLabel::*;
        #[derive(PartialEq)]
        enum Group {
            Compute,
            Mixed,
            NonCompute,
        }
        let sustained = plateau >= self.plateau_fraction;
        let group = if activity >= self.high_swing {
            Group::Mixed
        } else if sustained {
            Group::Compute
        } else if activity <= self.low_swing {
            Group::NonCompute
        } else {
            Group::Mixed
        };
        let high = mean_power >= self.power_split;
        match (group, high) {
            (Group::Compute, true) => CIH,
            (Group::Compute, false) => CIL,
            (Group::Mixed, true) => MH,
            (Group::Mixed, false) => ML,
            (Group::NonCompute, true) => NCH,
            (Group::NonCompute, false) => NCL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: u32,
    /// Source cluster label, or `None` for classes promoted by review.
    pub cluster_label: Option<i64>,
    pub members: Vec<String>,
    pub medoid_job_id: String,
    pub representative: JobProfile,
    pub intensity_label: IntensityLabel,
    pub size: usize,
    pub mean_power: f64,
    pub swing_activity: f64,
    pub plateau_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub classes: Vec<ClassEntry>,
    pub residual: Vec<String>,
    /// Next id to hand out; ids are never reused.
    pub next_class_id: u32,
    pub params: CatalogParams,
}

impl ClassCatalog {
    pub fn class(&self, id: u32) -> Option<&ClassEntry> {
        self.classes.iter().find(|c| c.class_id == id)
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    /// `job_id -> class_id` for every classified job.
    pub fn assignments(&self) -> BTreeMap<String, u32> {
        self.classes
            .iter()
            .flat_map(|c| c.members.iter().map(move |m| (m.clone(), c.class_id)))
            .collect()
    }

    /// Appends a class under a fresh id and returns that id.
    pub fn add_class(&mut self, mut entry: ClassEntry) -> u32 {
        let id = self.next_class_id;
        entry.class_id = id;
        self.next_class_id += 1;
        let members: std::collections::BTreeSet<&String> = entry.members.iter().collect();
        self.residual.retain(|j| !members.contains(j));
        self.classes.push(entry);
        id
    }
}

/// Member with the smallest summed distance to the other members.
pub(crate) fn medoid<'a>(
    members: &[&'a String],
    points: &BTreeMap<String, Vec<f64>>,
) -> &'a String {
    let mut best = (members[0], f64::INFINITY);
    for &m in members {
        let p = &points[m];
        let total: f64 = members.iter().map(|o| euclidean(p, &points[*o])).sum();
        if total < best.1 {
            best = (m, total);
        }
    }
    best.0
}

pub(crate) fn plateau_fraction(profile: &JobProfile, threshold: f64) -> f64 {
    let hits = profile.values.iter().filter(|v| **v >= threshold).count();
    hits as f64 / profile.values.len().max(1) as f64
}

/// Summarizes a set of member jobs into a class entry (id left at 0).
pub(crate) fn describe_class(
    members: Vec<String>,
    cluster_label: Option<i64>,
    profiles: &BTreeMap<&str, &JobProfile>,
    features: &BTreeMap<&str, &FeatureVector>,
    points: &BTreeMap<String, Vec<f64>>,
    params: &CatalogParams,
) -> Result<ClassEntry> {
    let refs: Vec<&String> = members.iter().collect();
    let medoid_id = medoid(&refs, points).clone();
    let representative = (*profiles
        .get(medoid_id.as_str())
        .ok_or_else(|| Error::data(format!("no profile for job {medoid_id}")))?)
    .clone();
    let mut activity = 0.0;
    let mut power = 0.0;
    for m in &members {
        let f = features
            .get(m.as_str())
            .ok_or_else(|| Error::data(format!("no features for job {m}")))?;
        activity += swing_activity(&f.values);
        power += f.values[MEAN_POWER_INDEX];
    }
    let n = members.len() as f64;
    let (activity, power) = (activity / n, power / n);
    let plateau = plateau_fraction(&representative, params.plateau_power);
    Ok(ClassEntry {
        class_id: 0,
        cluster_label,
        size: members.len(),
        members,
        medoid_job_id: medoid_id,
        representative,
        intensity_label: params.classify(activity, power, plateau),
        mean_power: power,
        swing_activity: activity,
        plateau_fraction: plateau,
    })
}

/// Turns a clustering into a catalog: clusters of at least
/// `min_class_size` become classes with dense ids in cluster-label order;
/// everything else is residual. `points` (latents, usually) decide the
/// medoid.
pub fn build_catalog(
    result: &ClusterResult,
    profiles: &[JobProfile],
    features: &[FeatureVector],
    points: &BTreeMap<String, Vec<f64>>,
    params: &CatalogParams,
) -> Result<ClassCatalog> {
    let profiles: BTreeMap<&str, &JobProfile> =
        profiles.iter().map(|p| (p.job_id.as_str(), p)).collect();
    let features: BTreeMap<&str, &FeatureVector> =
        features.iter().map(|f| (f.job_id.as_str(), f)).collect();
    for id in result.labels.keys() {
        if !points.contains_key(id) {
            return Err(Error::data(format!("no point for clustered job {id}")));
        }
    }

    let mut groups: BTreeMap<i64, Vec<String>> = BTreeMap::new();
    for (id, &l) in &result.labels {
        groups.entry(l).or_default().push(id.clone());
    }
    let mut catalog = ClassCatalog {
        classes: Vec::new(),
        residual: Vec::new(),
        next_class_id: 0,
        params: params.clone(),
    };
    for (label, members) in groups {
        if label == NOISE || members.len() < params.min_class_size {
            catalog.residual.extend(members);
            continue;
        }
        let entry = describe_class(members, Some(label), &profiles, &features, points, params)?;
        catalog.add_class(entry);
    }
    catalog.residual.sort();
    Ok(catalog)
}
