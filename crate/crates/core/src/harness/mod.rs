//! Configuration, training, evaluation and ablation drivers.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod train;

pub use ablate::{ablate, parse_arms, AblationReport, Arm};
pub use config::{EvalMode, RunConfig};
pub use eval::{evaluate, evaluate_with, split_instances, EvalReport};
pub use train::{train_in_memory, train_to_dir, train_with, RunData, TrainSummary};
