//! Pixel-level cycle association for domain-adaptive semantic segmentation,
//! scaled down to run on a desk machine.
//!
//! The crate is layered:
//!
//! * [`tensor`] — a self-contained reverse-mode autodiff engine over dense
//!   row-major tensors, with a finite-difference gradient checker.
//! * [`similarity`], [`association`], [`aggregation`] — pixel-to-pixel
//!   similarity maps (cosine, negative KL), cycle association between a
//!   source and a target image, and spatial aggregation of target features.
//! * [`losses`] — segmentation cross-entropy, Lovász-softmax, the cycle
//!   association losses on features and predictions, and label-smooth
//!   regularization.
//! * [`segnet`] — a small fully-convolutional network producing per-pixel
//!   features and class probabilities at 1/4 resolution.
//! * [`datagen`], [`train`], [`eval`], [`gradcheck`] — a synthetic
//!   two-domain benchmark, the adaptation trainer with its ablation matrix,
//!   mIoU evaluation, and the end-to-end gradient check suite.
//!
//! Everything is deterministic: fixed seeds give bitwise-identical metrics,
//! checkpoints and datasets.

#![forbid(unsafe_code)]

pub mod aggregation;
pub mod association;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod scalar;
pub mod segnet;
pub mod similarity;
pub mod tensor;
pub mod train;

pub use error::{PlcaError, TensorError};
pub use scalar::Scalar;
pub use tensor::{Graph, Var};

/// The training and evaluation pipelines run at f64.
pub type GraphF64 = Graph<f64>;
/// f32 instantiation of the engine; handy for memory-tight experiments.
pub type GraphF32 = Graph<f32>;

/// Label value marking pixels excluded from losses and associations.
pub const IGNORE_LABEL: u8 = 255;
