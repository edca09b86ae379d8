//! Learning machinery for open-world object detection on a deterministic
//! synthetic world.
//!
//! The crate is organised around five subsystems:
//!
//! - [`cluster`] — contrastive prototype clustering in latent space: bounded
//!   per-class feature queues, momentum-updated class prototypes, and the
//!   margin-based clustering loss with its analytic gradient.
//! - [`energy`] — free-energy scoring of classification logits, shifted-Weibull
//!   maximum-likelihood fits of known/unknown energy samples, and the
//!   pdf-comparison unknown decision rule (plus a softmax-threshold baseline).
//! - [`boxes`] — box geometry, IoU, and the auto-labelling heuristic that
//!   pseudo-labels high-objectness background proposals as unknowns.
//! - [`eval`] — greedy detection matching, precision/recall curves, mAP,
//!   Wilderness Impact, and Absolute Open-Set Error.
//! - [`protocol`] — the open-world loop: task schedule, synthetic world
//!   generation, a linear classification head, exemplar replay with balanced
//!   finetuning, and per-task metric reports.

pub mod boxes;
pub mod cluster;
pub mod energy;
pub mod eval;
pub mod protocol;

pub use boxes::{AnnotatedBox, BoundingBox, Proposal};
pub use cluster::{
    ClusteringConfig, ClusteringState, FeatureStore, FeatureVector, PrototypeSet,
};
pub use energy::{EnergyClassifier, EnergyConfig, LogitVector, WeibullModel};
pub use eval::{DetectionRecord, EvalSet, MetricsReport, PrCurve, PrPoint};
pub use protocol::{
    AblationFlags, ExemplarStore, InstanceRecord, LinearHead, SyntheticWorldConfig, TaskSchedule,
    TrainConfig,
};

/// Class identifier. Class `0` is reserved for the unknown label.
pub type ClassId = u32;

/// The reserved label for unknown objects.
pub const UNKNOWN_CLASS: ClassId = 0;

/// Image identifier within a generated or imported dataset.
pub type ImageId = u64;
