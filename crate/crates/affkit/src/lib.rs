//! Multi-task facial-affect learning toolkit.
//!
//! Everything here runs at desk scale on synthetic data: a tape-based
//! reverse-mode autodiff core, the multi-task training losses (class-weighted
//! cross entropy, negative CCC, weighted binary cross entropy, label
//! smoothing), competition-style metrics, a class-balancing RandAugment
//! pipeline, a tiny convolutional backbone with multi-slot prediction
//! averaging and a frozen/trainable deviation extractor, optimizers with
//! cosine annealing, checkpointing, and probability-averaging ensembles.

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
mod fsutil;
pub mod losses;
pub mod model;
pub mod trainer;
pub mod metrics;
pub mod seeding;

pub use autodiff::{Pool, Precision, Tape, Tensor, Var};
pub use error::{Error, Result};
