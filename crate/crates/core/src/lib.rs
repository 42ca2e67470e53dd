//! Taxonomic classification with a guaranteed level of competence.
//!
//! The model is a single linear layer over a class taxonomy. Each node owns a
//! residual parameter vector and the effective predictor of a node is the sum
//! of residuals along its root path, so coarse decisions share parameters
//! with every fine decision below them. Training mixes two losses: a
//! cross-entropy on a randomly sampled tree cut (so every intermediate label
//! set is a valid classifier) and a node-conditional consistency term over
//! the branching decisions on each sample's root path. At test time the
//! classifier walks the tree top-down and stops where its confidence drops
//! below a competence level, trading label depth for correctness.
//!
//! `taxonomy` owns the tree, codewords and cut machinery; `model` the
//! parameters and forward passes; `training` losses, analytic gradients and
//! SGD; `inference` the rejection rules; `evaluation` the metrics; `data`
//! dataset I/O and the synthetic benchmark generator; `checkpoint` model
//! persistence.

pub mod checkpoint;
pub mod data;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod taxonomy;
pub mod training;

pub use checkpoint::{Checkpoint, CheckpointError, FeatureMapSpec, CHECKPOINT_VERSION};
pub use data::{DataError, Dataset, SplitTag, SynthOutput, SyntheticConfig};
pub use evaluation::{Bucket, EvalError, Metrics, MetricsReport, PopularitySplit, SplitRule};
pub use inference::{
    calibrate_gamma, default_gamma_grid, flat_reject_predict, leaf_posterior, rhc_predict,
    rtc_predict, threshold_for_rate, CompetenceLevel, Decision, InferenceError, PathStep,
};
pub use model::{FeatureMap, ModelError, NodeParams, Posterior};
pub use taxonomy::{
    CodewordMatrix, EnumeratedCut, LabelSet, LabelSetKind, NodeId, NodeRecord, Taxonomy,
    TaxonomyError, DEFAULT_MAX_CUTS,
};
pub use training::{
    EpochStats, FeatureMapKind, Gradients, LossBreakdown, TrainConfig, TrainError, TrainedModel,
};
