//! Optimisation loop, evaluation metrics, gradient checking, ablation
//! runner and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod schedule;
pub mod synthetic;
pub mod train;

pub use config::{AblationMode, RunConfig};
pub use gradcheck::{fixture_batch, gradient_check, GradCheckOptions, GradCheckReport, Objective};
pub use metrics::{rmse, roc_auc, task_metric};
pub use report::{run_ablation, run_seeds, AblationReport, RunReport};
pub use train::{evaluate, gate_weights, predict, run_seed, train, EpochRecord, TrainOutcome};
