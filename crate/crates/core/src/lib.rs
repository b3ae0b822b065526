//! Out-of-distribution detection from class-conditional bounds on
//! higher-order Gram matrix feature correlations.
//!
//! The pipeline is: read activations ([`ingest`]), reduce each layer's
//! order-`p` Gram matrices to statistic vectors ([`gram`]), fit per-class
//! min/max or mean/variance tables over the training set ([`tables`]),
//! score new examples by their total deviation from those tables
//! ([`deviation`]), and evaluate detection quality ([`metrics`]).
//! [`harness`] wires these into the experiments exposed by the CLI.

pub mod deviation;
pub mod error;
mod fsutil;
pub mod gram;
pub mod harness;
pub mod ingest;
pub mod metrics;
pub mod report;
pub mod tables;

pub use deviation::{
    calibrate_threshold, compute_normalizer, deviation_gaussian, deviation_scalar, is_ood, layer_deviation,
    score_record, total_deviation, Aggregation, NormalizerVector, ScoredExample, Threshold,
};
pub use error::{ErrorClass, FormatError, OodError, Result};
pub use fsutil::write_atomic;
pub use gram::{compute_all_stats, extract_stat, gram_matrix, FeatureMap, GramMatrix, GramStat, OrderSet, StatVariant};
pub use ingest::{ActivationRecord, DatasetHandle, DatasetRole, GactLayout};
pub use metrics::{auroc, detection_accuracy, evaluate, tnr_at_95tpr, EvalResult};
pub use tables::{
    fit_bounds, fit_moments, load_table, merge_bounds, save_table, BoundsTable, MetricKind, MomentsTable, StatTable,
    TableSpec,
};
