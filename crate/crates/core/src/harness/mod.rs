//! Training, evaluation, ablations and report emission.

pub mod ablation;
pub mod config;
pub mod metrics;
pub mod objective;
pub mod optimizer;
pub mod report;
pub mod train;
pub mod transform;
