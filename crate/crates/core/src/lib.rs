//! Job-level HPC power profiling.
//!
//! Node telemetry and scheduler records become per-job 10 s power
//! profiles ([`ingest`]), which are summarized by a fixed 186-element
//! feature vector ([`features`]), embedded into a 10-d latent space by an
//! encoder/generator/critic ensemble ([`gan`]), clustered into classes
//! ([`cluster`]) and served by a distance-based open-set classifier
//! ([`openset`]). [`workflow`] ties the stages together.

pub mod cluster;
pub mod error;
pub mod features;
pub mod gan;
pub mod ingest;
pub mod neural;
pub mod openset;
pub mod synth;
pub mod workflow;

pub use error::{Error, Result};
pub use features::{FeatureVector, Scaler, NUM_FEATURES};
pub use ingest::{JobProfile, JobRecord, PowerSample};
