//! Multilabel stratified cross-validation, desk-scale base learners,
//! median-pruned tuning and out-of-fold GBDT stacking.

pub mod config;
pub mod explain;
pub mod features;
pub mod hyperopt;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod predictions;
pub mod schema;
pub mod seeds;
pub mod simulate;
pub mod stacking;
pub mod stratify;
pub mod taxonomy;
pub mod trainer;

pub use config::PipelineConfig;
pub use features::FeatureMatrix;
pub use hyperopt::TrialParams;
pub use manifest::{BinaryLabelMatrix, Manifest};
pub use metrics::MetricsReport;
pub use pipeline::{run_pipeline, Run, RunLedger, RunReport};
pub use predictions::PredictionMatrix;
pub use schema::{LabelDef, LabelSchema};
pub use seeds::derive_seed;
pub use stacking::{GbdtMetaLearner, GbdtParams, OofMatrix};
pub use stratify::{FoldAssignment, SplitView};
pub use taxonomy::LabelMapping;
pub use trainer::{BaseLearnerModel, BaseLearnerSpec};
