//! Few-shot adaptation of frozen vision-language classifiers on cached
//! features: fine-tune only the embedding projection, anchored to its
//! pretrained value by a Frobenius penalty.
//!
//! Modules follow the pipeline: [`model`] for the forward pass,
//! [`objective`] and [`trainer`] for fitting, [`ttadapt`] for per-sample
//! adaptation, [`baselines`] for comparison methods, [`eval`] for metrics
//! and [`data`] for containers and synthetic scenarios.

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod trainer;
pub mod ttadapt;

#[cfg(test)]
mod testutil;

pub use baselines::{Adapted, MethodOptions, MethodTag};
pub use data::{Manifest, SynthConfig, SynthData};
pub use error::{Error, FormatError, Result};
pub use eval::{BaseNewResult, BaseNewSplit, EvalReport};
pub use model::{FeatureBank, ProjectionHead, TextClassifier};
pub use numerics::{Mat, ProbVec};
pub use objective::{LossBreakdown, LossGrad};
pub use trainer::{LambdaSchedule, LrSchedule, Optimizer, SweepCell, SweepResult, TrainConfig, TrainHistory};
pub use ttadapt::{StreamOutput, TTConfig};
