//! Desk-scale toolkit for studying whether dense optical flow helps
//! unsupervised domain adaptation of a per-pixel segmenter.
//!
//! The pipeline is: [`synthgen`] renders paired frames in a labeled source
//! domain and an appearance-shifted target domain, [`optflow`] estimates
//! dense flow with a pyramidal Farneback estimator and encodes it as an
//! image, [`fusion`] stacks RGB with the flow encoding, [`segmodel`] trains
//! a small softmax segmenter, [`cbst`] adapts it to the target domain with
//! class-balanced self-training and [`eval`] scores the result by mIoU.

// Negated comparisons are how parameter checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cbst;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod imagecore;
pub mod optflow;
pub mod segmodel;
pub mod synthgen;

pub use cbst::{ClassThresholds, RoundSchedule, SpatialPrior};
pub use error::{Error, Result};
pub use eval::ConfusionMatrix;
pub use fusion::{ChannelStats, FeatureConfig};
pub use imagecore::{FlowField, Image, LabelMap, ProbMap, IGNORE};
pub use optflow::{FlowEncoding, FlowParams};
pub use segmodel::{Model, TrainConfig};
pub use synthgen::{DomainShift, SceneSpec};
