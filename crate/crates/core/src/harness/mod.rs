//! Synthetic continual video instance segmentation: task generation,
//! training, evaluation, forgetting metrics, ablations, benchmarks and the
//! run directory.

pub mod ablation;
pub mod bench;
pub mod config;
pub mod eval;
pub mod loss;
pub mod metrics;
pub mod oracle_check;
pub mod run;
pub mod store;
pub mod tasks;
pub mod train;

pub use config::TrainConfig;
pub use run::{run_experiment, RunOutcome};
pub use train::{train_task, Experiment, RunState};
