//! Optimizers, schedules, the training loop, gradient-check suites, and
//! checkpoint persistence.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod training;

pub use checkpoint::{load_checkpoint, load_model, save_model, Checkpoint, TrainingProgress};
pub use gradcheck::{gradient_check, GradCheckReport, Suite};
pub use optim::{cosine_lr, Optimizer, OptimizerKind, Schedule};
pub use training::{
    evaluate_model, fit, forward_dataset, load_dataset, report_from_outputs, train_epoch,
    EpochRecord, EpochStats, FitOptions, FitResult, LoadedDataset, RawOutputs, TaskWeights,
    TrainConfig,
};
