//! Prompt-aligned gradient surgery on a small, fully differentiable stand-in
//! for prompt tuning of a vision-language model.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: vector primitives, softmax, angles, the seeded stream and
//!   a finite-difference oracle.
//! - [`vlm`]: the frozen toy text encoder and its zero-shot teacher.
//! - [`losses`]: cross-entropy, teacher KL and the ℓ2 prompt regulariser with
//!   analytic gradients.
//! - [`surgery`]: update rules (CE, ProGrad, KD, gradient matching, ℓ2 reg).
//! - [`datagen`]: synthetic domains with a controllable gap and few-shot episodes.
//! - [`trainer`]: SGD with warm-up and cosine annealing, plus full traces.
//! - [`harness`]: experiment protocols writing CSV/JSON artifacts.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod datagen;
pub mod error;
pub mod harness;
pub mod losses;
pub mod numerics;
pub mod surgery;
pub mod trainer;
pub mod vlm;

pub use error::{Error, Result};
