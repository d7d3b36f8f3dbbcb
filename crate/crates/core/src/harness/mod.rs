//! Synthetic data, optimizers, the training loop, evaluation and
//! finite-difference gradient checking.

pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use dataset::{DatasetSpec, SyntheticVideoDataset};
pub use eval::{argmax, evaluate, evaluate_report, predict, top1, EvalReport};
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use train::{train, train_with_eval, EpochRecord, TrainHistory};
