//! Composition root: configuration, model assembly, training, evaluation,
//! ablations and checkpoints.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod optim;
pub mod report;
pub mod train;

pub use ablation::{run_ablation, AblationAxis, AblationTable};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, Restored};
pub use config::{BranchMode, ExperimentConfig};
pub use eval::{evaluate, EvalOptions, Evaluation};
pub use model::Model;
pub use optim::Adam;
pub use train::{train, train_with_resume, TrainOutcome};
