//! Orchestration: artifacts, the batch pipeline, temporal evaluation and
//! the review-and-retrain loop.

pub mod artifact;
pub mod iterative;
pub mod pipeline;
pub mod temporal;

pub use artifact::{load_artifact, save_artifact, ARTIFACT_VERSION};
pub use iterative::{
    auto_eps, export_proposal, k_distances, recluster_unknowns, retrain, review, ArchivedModel,
    CatalogLock, ClassProposal, ModelArchive, PoolEntry, ProposalBook, ProposalStatus,
    ReclusterParams, RetrainOutcome, RetrainParams, ReviewRecord, UnknownPool, Verdict,
};
pub use pipeline::{
    files, fit_classifier, kinds, load_manifest, run_pipeline, ClassifierFit, ClassifierSplit,
    PipelineConfig, PipelineInputs, PipelineRun, RunManifest,
};
pub use temporal::{temporal_eval, TemporalConfig, TemporalReport, TemporalSample};
