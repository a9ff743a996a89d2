//! The three boundary-decoder training variants and the nearest-neighbour baseline.

mod config;
pub mod knn;
mod run;
mod steps;

pub use config::{TrainConfig, Variant};
pub use knn::{ae_knn_fit, ae_knn_predict, ae_knn_predict_batch, LatentStore};
pub use run::{
    recompute_clusters, run_training, BatchSampler, CheckpointRecord, Prepared, RunTiming, TrainOutcome,
    TrainReport,
};
pub use steps::{build_loss, composite_loss, variant_gradients, Batch, LossTerms, TermWeights, Trainer};
