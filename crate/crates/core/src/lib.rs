//! Prototype-guided refinement of imperfect 1-D patterns.
//!
//! A convolutional classifier is trained on clean ("ideal") patterns so that
//! its embedding space clusters around one prototype per class. A small
//! encoder–decoder refiner is then trained, with the classifier frozen, to
//! nudge corrupted patterns until the classifier recognizes them, pulling
//! their embeddings toward the class prototypes while penalizing large edits.
//!
//! Module map:
//! - [`tensor`]: tensors and the reverse-mode tape
//! - [`nn`]: layers, the classifier and refiner networks, checkpoints
//! - [`proto`]: prototypes and every loss
//! - [`train`]: optimizers and the two training loops, plus the loss ablation
//! - [`data`]: synthetic pattern generation, corruption, splits, dataset files
//! - [`metrics`]: accuracy, pattern differences, reports, embedding projection
//! - [`par`]: data-parallel helpers with a sequential fallback

pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod proto;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
