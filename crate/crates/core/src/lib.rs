//! Knowledge transfer between convolutional classifiers via factor transfer,
//! with knowledge-distillation and attention-transfer baselines, built on a
//! self-contained reverse-mode autodiff tensor engine.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense N-d tensors with a Wengert-tape backward pass
//! * [`nn`] — layers, networks, and the four concrete architectures
//!   (teacher, student, paraphraser, translator)
//! * [`loss`] — reconstruction, cross-entropy, factor-transfer, KD and AT
//!   objectives plus hybrid composition
//! * [`data`] — CIFAR-10 binary / MNIST IDX ingestion, a deterministic
//!   synthetic generator, augmentation and batching
//! * [`train`] — SGD, schedules, the two-stage training pipeline,
//!   checkpoints and metrics
//! * [`check`] — finite-difference and brute-force oracles used by tests
//!   and the `gradcheck` command

pub mod check;
pub mod data;
pub mod error;
pub mod loss;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{NoGradGuard, Tensor};
