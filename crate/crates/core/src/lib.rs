//! Learning with noisy labels: synthetic label corruption, small MLPs trained
//! with hand-written gradients, Co-teaching baselines, and mutual label
//! correction with two networks and a shared trainable label distribution.

pub mod data;
pub mod harness;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod trainers;

pub use data::{Dataset, DataError, SplitTag};
pub use labels::{CorrectionTable, LabelError, LabelStore};
pub use losses::{LossBreakdown, LossError, LossWeights};
pub use metrics::{EpochRecord, MetricsError, RunMetrics, RunSummary};
pub use nn::{Adam, AdamConfig, Mlp, NnError};
pub use noise::{corrupt_labels, CorruptionRecord, NoiseError, NoiseKind, NoiseModel};
pub use trainers::{run, RunOutput, Seeds, Stage, Strategy, TrainConfig, TrainError};
pub use harness::{parse_config, ExperimentSpec, HarnessError, RunOptions};
