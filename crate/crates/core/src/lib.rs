//! Rogue-sensor detection for fleets of co-located time-series sensors.
//!
//! The pipeline learns a 2-D embedding per sensor with a triplet loss whose
//! negatives are drawn from the DTW-furthest series, then clusters the
//! embeddings with DBSCAN; sensors that fall outside the dense majority
//! (or into their own dense groups) are the rogue candidates.
//!
//! Modules follow the pipeline order: [`data`] ingestion and normalization,
//! [`dtw`] distances, [`sampler`] triplet selection, [`encoder`] dilated
//! causal CNN, [`training`] loss + Adam, [`clustering`] DBSCAN with knee-based
//! epsilon, [`evaluation`] adjusted Rand index, and [`simgen`] synthetic
//! fleets with ground truth.

pub mod clustering;
pub mod data;
pub mod dtw;
pub mod encoder;
pub mod evaluation;
pub mod rng;
pub mod sampler;
pub mod simgen;
pub mod training;

pub use data::{Dataset, NormStats, ScaleMode, SensorSeries};
pub use dtw::{DistanceMatrix, DtwOptions};
pub use encoder::{EmbeddingSet, EncoderConfig, EncoderParams};
pub use sampler::Triplet;
pub use training::{TrainConfig, TrainLog};
