//! Unknown pool, reclustering into class proposals, human review and
//! classifier retraining.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::{fit_classifier, payload_digest, ClassifierFit};
use crate::cluster::catalog::{describe_class, medoid};
use crate::cluster::{dbscan_labels, euclidean, ClassCatalog, NOISE};
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::ingest::JobProfile;
use crate::openset::{percentile, ClassifierConfig, ClassifierModel, Outcome, Prediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub job_id: String,
    pub latent: Vec<f64>,
    pub features: Vec<f64>,
    pub timestamp: i64,
    pub min_distance: f64,
    pub profile: JobProfile,
}

/// Jobs the classifier rejected. Entries only leave the pool by being
/// moved into a proposal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnknownPool {
    pub entries: Vec<PoolEntry>,
    /// Completed recluster passes.
    pub cycle: u32,
}

impl UnknownPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, job_id: &str) -> bool {
        self.entries.iter().any(|e| e.job_id == job_id)
    }

    pub fn latents(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.latent.clone()).collect()
    }

    /// Adds the job when the prediction is UNKNOWN and the job is new to
    /// the pool; returns whether it was added.
    pub fn admit(
        &mut self,
        prediction: &Prediction,
        latent: &[f64],
        features: &FeatureVector,
        profile: &JobProfile,
    ) -> bool {
        if prediction.outcome != Outcome::Unknown || self.contains(&prediction.job_id) {
            return false;
        }
        self.entries.push(PoolEntry {
            job_id: prediction.job_id.clone(),
            latent: latent.to_vec(),
            features: features.values.clone(),
            timestamp: profile.t0,
            min_distance: prediction.min_distance,
            profile: profile.clone(),
        });
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalStatus {
    Pending,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub proposal_id: u32,
    pub verdict: Verdict,
    pub operator: String,
    pub timestamp: i64,
    pub class_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProposal {
    pub proposal_id: u32,
    pub members: Vec<PoolEntry>,
    pub medoid_job_id: String,
    pub size: usize,
    /// Assigned on approval.
    pub proposed_class_id: Option<u32>,
    pub status: ProposalStatus,
    /// Set once a retrained classifier includes the class.
    pub incorporated: bool,
}

impl ClassProposal {
    pub fn medoid_profile(&self) -> &JobProfile {
        &self
            .members
            .iter()
            .find(|m| m.job_id == self.medoid_job_id)
            .expect("medoid is a member")
            .profile
    }

    pub fn member_ids(&self) -> Vec<String> {
        self.members.iter().map(|m| m.job_id.clone()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProposalBook {
    pub proposals: Vec<ClassProposal>,
    pub next_proposal_id: u32,
    pub log: Vec<ReviewRecord>,
}

impl ProposalBook {
    pub fn get(&self, id: u32) -> Option<&ClassProposal> {
        self.proposals.iter().find(|p| p.proposal_id == id)
    }

    pub fn pending(&self) -> impl Iterator<Item = &ClassProposal> {
        self.proposals
            .iter()
            .filter(|p| p.status == ProposalStatus::Pending)
    }

    /// Approved proposals not yet covered by a retrained classifier.
    pub fn awaiting_retrain(&self) -> impl Iterator<Item = &ClassProposal> {
        self.proposals
            .iter()
            .filter(|p| p.status == ProposalStatus::Approved && !p.incorporated)
    }

    /// Latents of every approved proposal's members.
    pub fn approved_latents(&self) -> BTreeMap<String, Vec<f64>> {
        self.proposals
            .iter()
            .filter(|p| p.status == ProposalStatus::Approved)
            .flat_map(|p| {
                p.members
                    .iter()
                    .map(|m| (m.job_id.clone(), m.latent.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReclusterParams {
    /// Neighborhood radius; `None` picks it from the pool's sorted
    /// k-distance graph so that about `noise_fraction` of the pool is
    /// non-core.
    pub eps: Option<f64>,
    pub min_pts: usize,
    pub min_class_size: usize,
    pub noise_fraction: f64,
}

impl Default for ReclusterParams {
    fn default() -> Self {
        Self {
            eps: None,
            min_pts: 10,
            min_class_size: 50,
            noise_fraction: 0.1,
        }
    }
}

/// Distance from each point to its `min_pts`-th nearest neighbor, the
/// point itself counting as the first.
pub fn k_distances(points: &[Vec<f64>], min_pts: usize) -> Vec<f64> {
    let k = min_pts.clamp(1, points.len().max(1)) - 1;
    points
        .iter()
        .map(|p| {
            let mut d: Vec<f64> = points.iter().map(|q| euclidean(p, q)).collect();
            d.sort_by(f64::total_cmp);
            d.get(k).copied().unwrap_or(0.0)
        })
        .collect()
}

/// The sorted k-distance heuristic: the `1 - noise_fraction` quantile of
/// the k-distances.
pub fn auto_eps(points: &[Vec<f64>], min_pts: usize, noise_fraction: f64) -> f64 {
    percentile(&k_distances(points, min_pts), 1.0 - noise_fraction)
}

/// DBSCAN over the pooled latents. Clusters of at least `min_class_size`
/// leave the pool as pending proposals, numbered largest first; returns
/// the new proposal ids.
pub fn recluster_unknowns(
    pool: &mut UnknownPool,
    book: &mut ProposalBook,
    params: &ReclusterParams,
) -> Result<Vec<u32>> {
    pool.cycle += 1;
    if pool.len() < params.min_pts.max(1) {
        log::warn!(
            "pool holds {} jobs, fewer than min_pts {}",
            pool.len(),
            params.min_pts
        );
        return Ok(Vec::new());
    }
    let latents = pool.latents();
    let eps = match params.eps {
        Some(e) => e,
        None => auto_eps(&latents, params.min_pts, params.noise_fraction),
    };
    if !(eps > 0.0) {
        log::warn!("pool has no spread (eps {eps}); nothing to cluster");
        return Ok(Vec::new());
    }
    log::info!("recluster: {} pooled jobs, eps {eps:.4}", latents.len());
    let labels = dbscan_labels(&latents, eps, params.min_pts)?;
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != NOISE {
            groups.entry(l).or_default().push(i);
        }
    }
    let mut kept: Vec<(i64, Vec<usize>)> = groups
        .into_iter()
        .filter(|(_, g)| g.len() >= params.min_class_size)
        .collect();
    kept.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

    let points: BTreeMap<String, Vec<f64>> = pool
        .entries
        .iter()
        .map(|e| (e.job_id.clone(), e.latent.clone()))
        .collect();
    let mut taken = BTreeSet::new();
    let mut ids = Vec::new();
    for (_, group) in &kept {
        let members: Vec<PoolEntry> = group.iter().map(|&i| pool.entries[i].clone()).collect();
        let refs: Vec<&String> = members.iter().map(|m| &m.job_id).collect();
        let medoid_job_id = medoid(&refs, &points).clone();
        let id = book.next_proposal_id;
        book.next_proposal_id += 1;
        taken.extend(group.iter().copied());
        book.proposals.push(ClassProposal {
            proposal_id: id,
            size: members.len(),
            members,
            medoid_job_id,
            proposed_class_id: None,
            status: ProposalStatus::Pending,
            incorporated: false,
        });
        ids.push(id);
    }
    let mut idx = 0;
    pool.entries.retain(|_| {
        let keep = !taken.contains(&idx);
        idx += 1;
        keep
    });
    Ok(ids)
}

/// Records a verdict. Approval appends a class to the catalog under the
/// next free id; rejection returns the members to the pool.
pub fn review(
    book: &mut ProposalBook,
    catalog: &mut ClassCatalog,
    pool: &mut UnknownPool,
    proposal_id: u32,
    verdict: Verdict,
    operator: &str,
    timestamp: i64,
) -> Result<ClassProposal> {
    let p = book
        .proposals
        .iter_mut()
        .find(|p| p.proposal_id == proposal_id)
        .ok_or_else(|| Error::data(format!("no proposal {proposal_id}")))?;
    if p.status != ProposalStatus::Pending {
        return Err(Error::AlreadyDecided(proposal_id));
    }
    let mut class_id = None;
    match verdict {
        Verdict::Approve => {
            let profiles: BTreeMap<&str, &JobProfile> = p
                .members
                .iter()
                .map(|m| (m.job_id.as_str(), &m.profile))
                .collect();
            let fvs: Vec<FeatureVector> = p
                .members
                .iter()
                .map(|m| FeatureVector {
                    job_id: m.job_id.clone(),
                    values: m.features.clone(),
                })
                .collect();
            let features: BTreeMap<&str, &FeatureVector> =
                fvs.iter().map(|f| (f.job_id.as_str(), f)).collect();
            let points: BTreeMap<String, Vec<f64>> = p
                .members
                .iter()
                .map(|m| (m.job_id.clone(), m.latent.clone()))
                .collect();
            let entry = describe_class(
                p.member_ids(),
                None,
                &profiles,
                &features,
                &points,
                &catalog.params,
            )?;
            let id = catalog.add_class(entry);
            p.proposed_class_id = Some(id);
            p.status = ProposalStatus::Approved;
            class_id = Some(id);
        }
        Verdict::Reject => {
            for m in &p.members {
                if !pool.contains(&m.job_id) {
                    pool.entries.push(m.clone());
                }
            }
            p.status = ProposalStatus::Rejected;
        }
    }
    book.log.push(ReviewRecord {
        proposal_id,
        verdict,
        operator: operator.to_string(),
        timestamp,
        class_id,
    });
    Ok(p.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchivedModel {
    pub model_version: u32,
    pub fingerprint: String,
    pub digest: String,
    pub class_ids: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub entries: Vec<ArchivedModel>,
}

#[derive(Debug, Clone)]
pub struct RetrainOutcome {
    pub fit: ClassifierFit,
    pub archived: ArchivedModel,
    pub added_classes: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainParams {
    pub train_fraction: f64,
    pub split_seed: u64,
    pub unknown_seed: u64,
    pub prior_unknowns: usize,
    pub force: bool,
}

/// Retrains the classifier over the whole catalog (including approved
/// proposals) and archives `previous`. Returns `None` when nothing is
/// awaiting retraining and `force` is off.
#[allow(clippy::too_many_arguments)]
pub fn retrain(
    catalog: &ClassCatalog,
    book: &mut ProposalBook,
    base_latents: &BTreeMap<String, Vec<f64>>,
    unknown: &[Vec<f64>],
    previous: &ClassifierModel,
    archive: &mut ModelArchive,
    cfg: &ClassifierConfig,
    params: &RetrainParams,
) -> Result<Option<RetrainOutcome>> {
    let added: Vec<u32> = book
        .awaiting_retrain()
        .filter_map(|p| p.proposed_class_id)
        .collect();
    if added.is_empty() && !params.force {
        log::info!("no approved proposals awaiting retraining; nothing to do");
        return Ok(None);
    }
    let mut latents = base_latents.clone();
    latents.extend(book.approved_latents());
    let mut fit = fit_classifier(
        catalog,
        &latents,
        unknown,
        cfg,
        params.train_fraction,
        params.split_seed,
        params.unknown_seed,
        params.prior_unknowns,
    )?;
    for id in &previous.class_ids {
        if !fit.model.class_ids.contains(id) {
            return Err(Error::data(format!("class {id} disappeared on retrain")));
        }
    }
    fit.model.model_version = previous.model_version + 1;
    fit.model.catalog_digest = Some(payload_digest(catalog)?);
    let archived = ArchivedModel {
        model_version: previous.model_version,
        fingerprint: previous.fingerprint.clone(),
        digest: payload_digest(previous)?,
        class_ids: previous.class_ids.clone(),
    };
    archive.entries.push(archived.clone());
    for p in book.proposals.iter_mut() {
        if p.status == ProposalStatus::Approved {
            p.incorporated = true;
        }
    }
    Ok(Some(RetrainOutcome {
        fit,
        archived,
        added_classes: added,
    }))
}

/// `window,offset_seconds,power_w` rows for one profile.
pub fn write_profile_csv<W: Write>(writer: W, profile: &JobProfile) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["window", "offset_seconds", "power_w"])?;
    for (k, v) in profile.values.iter().enumerate() {
        w.write_record([
            k.to_string(),
            (k as i64 * profile.step).to_string(),
            v.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `proposal-<id>-medoid.csv` and `proposal-<id>-samples.csv`
/// (long format, up to `samples` members) into `dir`.
pub fn export_proposal(
    dir: impl AsRef<Path>,
    proposal: &ClassProposal,
    samples: usize,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let medoid_path = dir.join(format!("proposal-{}-medoid.csv", proposal.proposal_id));
    write_profile_csv(fs::File::create(&medoid_path)?, proposal.medoid_profile())?;
    let sample_path = dir.join(format!("proposal-{}-samples.csv", proposal.proposal_id));
    let mut w = csv::Writer::from_path(&sample_path)?;
    w.write_record(["job_id", "window", "power_w"])?;
    for m in proposal.members.iter().take(samples) {
        for (k, v) in m.profile.values.iter().enumerate() {
            w.write_record([m.job_id.clone(), k.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(vec![medoid_path, sample_path])
}

/// Exclusive lock held while a catalog is being modified; released on drop.
#[derive(Debug)]
pub struct CatalogLock {
    path: PathBuf,
}

impl CatalogLock {
    pub fn acquire(catalog_path: impl AsRef<Path>) -> Result<Self> {
        let mut path = catalog_path.as_ref().as_os_str().to_owned();
        path.push(".lock");
        let path = PathBuf::from(path);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::data(format!(
                "catalog is locked by another writer ({})",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for CatalogLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::CatalogParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(id: String, latent: Vec<f64>, power: f64) -> PoolEntry {
        let profile = JobProfile::new(id.clone(), 0, 1, vec![power; 8]);
        let features = crate::features::extract_features(&profile).unwrap().values;
        PoolEntry {
            job_id: id,
            latent,
            features,
            timestamp: 0,
            min_distance: 9.0,
            profile,
        }
    }

    fn blob_pool(sizes: &[usize], scattered: usize) -> UnknownPool {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pool = UnknownPool::default();
        for (b, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                let c = 10.0 * b as f64;
                pool.entries.push(entry(
                    format!("b{b}-{i:03}"),
                    vec![c + rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
                    500.0,
                ));
            }
        }
        for i in 0..scattered {
            pool.entries.push(entry(
                format!("s{i:03}"),
                vec![
                    rng.random_range(-200.0..200.0),
                    rng.random_range(100.0..400.0),
                ],
                500.0,
            ));
        }
        pool
    }

    fn empty_catalog(next: u32) -> ClassCatalog {
        ClassCatalog {
            classes: Vec::new(),
            residual: Vec::new(),
            next_class_id: next,
            params: CatalogParams::default(),
        }
    }

    #[test]
    fn single_dense_group_gives_one_proposal() {
        let mut pool = blob_pool(&[120], 0);
        let mut book = ProposalBook::default();
        let ids = recluster_unknowns(&mut pool, &mut book, &ReclusterParams::default()).unwrap();
        assert_eq!(ids, vec![0]);
        assert_eq!(book.proposals[0].size, 120);
        assert!(pool.is_empty());
        assert_eq!(pool.cycle, 1);
    }

    #[test]
    fn auto_eps_follows_pool_scale() {
        let mut pool = blob_pool(&[120], 0);
        for e in &mut pool.entries {
            e.latent.iter_mut().for_each(|v| *v *= 40.0);
        }
        let fixed = ReclusterParams {
            eps: Some(0.8),
            ..Default::default()
        };
        let mut book = ProposalBook::default();
        assert!(recluster_unknowns(&mut pool.clone(), &mut book, &fixed)
            .unwrap()
            .is_empty());
        let ids = recluster_unknowns(&mut pool, &mut book, &ReclusterParams::default()).unwrap();
        assert_eq!(ids.len(), 1);
        assert!(book.proposals[0].size >= 108);
    }

    #[test]
    fn k_distance_counts_the_point_itself() {
        let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
        assert_eq!(k_distances(&pts, 1), vec![0.0, 0.0, 0.0]);
        assert_eq!(k_distances(&pts, 2), vec![1.0, 1.0, 2.0]);
        assert_eq!(k_distances(&pts, 3), vec![3.0, 2.0, 3.0]);
    }

    #[test]
    fn scattered_pool_gives_nothing() {
        let mut pool = blob_pool(&[], 30);
        let mut book = ProposalBook::default();
        let ids = recluster_unknowns(&mut pool, &mut book, &ReclusterParams::default()).unwrap();
        assert!(ids.is_empty());
        assert_eq!(pool.len(), 30);
    }

    #[test]
    fn proposals_sorted_by_size() {
        let mut pool = blob_pool(&[60, 90, 75], 5);
        let mut book = ProposalBook::default();
        recluster_unknowns(&mut pool, &mut book, &ReclusterParams::default()).unwrap();
        let sizes: Vec<usize> = book.proposals.iter().map(|p| p.size).collect();
        assert_eq!(sizes, vec![90, 75, 60]);
        assert_eq!(pool.len(), 5);
    }

    #[test]
    fn review_flow() {
        let mut pool = blob_pool(&[60, 55], 0);
        let mut book = ProposalBook::default();
        recluster_unknowns(&mut pool, &mut book, &ReclusterParams::default()).unwrap();
        let mut catalog = empty_catalog(8);

        let p = review(
            &mut book,
            &mut catalog,
            &mut pool,
            0,
            Verdict::Approve,
            "alice",
            100,
        )
        .unwrap();
        assert_eq!(p.status, ProposalStatus::Approved);
        assert_eq!(p.proposed_class_id, Some(8));
        assert_eq!(catalog.next_class_id, 9);
        assert_eq!(catalog.class(8).unwrap().size, 60);

        let p = review(
            &mut book,
            &mut catalog,
            &mut pool,
            1,
            Verdict::Reject,
            "bob",
            200,
        )
        .unwrap();
        assert_eq!(p.status, ProposalStatus::Rejected);
        assert_eq!(pool.len(), 55);

        let err = review(
            &mut book,
            &mut catalog,
            &mut pool,
            0,
            Verdict::Reject,
            "eve",
            300,
        )
        .unwrap_err();
        assert!(err.to_string().contains("already decided"), "{err}");
        assert_eq!(book.log.len(), 2);
        assert_eq!(book.log[1].operator, "bob");
        assert_eq!(book.log[0].timestamp, 100);
    }

    #[test]
    fn admit_only_unknowns_once() {
        let mut pool = UnknownPool::default();
        let profile = JobProfile::new("j", 5, 1, vec![1.0; 8]);
        let fv = crate::features::extract_features(&profile).unwrap();
        let mut pred = Prediction {
            job_id: "j".into(),
            outcome: Outcome::Known(1),
            min_distance: 0.1,
            distances: vec![0.1],
        };
        assert!(!pool.admit(&pred, &[0.0], &fv, &profile));
        pred.outcome = Outcome::Unknown;
        assert!(pool.admit(&pred, &[0.0], &fv, &profile));
        assert!(!pool.admit(&pred, &[0.0], &fv, &profile));
        assert_eq!(pool.entries[0].timestamp, 5);
    }

    #[test]
    fn export_writes_medoid_csv() {
        let mut pool = blob_pool(&[60], 0);
        let mut book = ProposalBook::default();
        recluster_unknowns(&mut pool, &mut book, &ReclusterParams::default()).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let paths = export_proposal(tmp.path(), &book.proposals[0], 3).unwrap();
        let medoid = fs::read_to_string(&paths[0]).unwrap();
        assert!(medoid.starts_with("window,offset_seconds,power_w\n0,0,500\n"));
        let samples = fs::read_to_string(&paths[1]).unwrap();
        assert_eq!(samples.lines().count(), 1 + 3 * 8);
    }

    #[test]
    fn lock_is_exclusive() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("catalog.json");
        let a = CatalogLock::acquire(&path).unwrap();
        assert!(CatalogLock::acquire(&path).is_err());
        drop(a);
        assert!(CatalogLock::acquire(&path).is_ok());
    }
}
