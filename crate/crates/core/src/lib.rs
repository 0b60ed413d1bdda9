//! Bayesian active learning for multi-structure segmentation at desk scale.
//!
//! The crate implements the full acquisition pipeline: a synthetic phantom
//! benchmark, a compact dropout pixel classifier trained with multi-class
//! focal loss, class-wise MC-dropout uncertainty scoring, hybrid
//! density/diversity greedy batch selection, and an experiment loop that
//! reports Dice and reduced-annotation-cost curves per strategy.

pub mod alloop;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod report;
pub mod rng;
pub mod repr;
pub mod uncertainty;

pub use alloop::{ExperimentRecord, IterationRecord, Strategy};
pub use data::{AcquisitionRule, Cohort, Dataset, PhantomConfig, PoolState, SampleKey, Volume};
pub use model::{Classifier, PredictiveSamples, TrainConfig};
