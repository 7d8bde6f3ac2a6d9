//! Fairness evaluation of a respiratory-sound classifier: WAV ingest, MFCC
//! features, a CART tree, group fairness metrics, threshold-based
//! post-processing mitigation and the repeated-run experiment around them.

pub mod audio;
pub mod dataset;
pub mod dsp;
pub mod experiment;
pub mod metrics;
pub mod mitigation;
pub mod report;
pub mod stats;
pub mod synthetic;
pub mod tree;

pub use audio::{Label, PatientRecord, Sex, SexCounts, Waveform};
pub use dataset::{Instance, SplitSpec};
pub use dsp::{DspConfig, FeatureVec, MfccMatrix};
pub use experiment::{DataSource, ExperimentConfig, ExperimentError, RunReport};
pub use metrics::{Confusion, MetricSnapshot};
pub use mitigation::{Constraint, GroupData, GroupMixture, ThresholdPolicy};
pub use stats::{MetricSummary, WelchResult};
pub use synthetic::SyntheticSpec;
pub use tree::{Criterion, ParamGrid, Tree, TreeParams};
