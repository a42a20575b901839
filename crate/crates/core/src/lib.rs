//! Training framework for sequence-to-sequence Transformer models with
//! deep mutual learning.
//!
//! A cohort of K student models is optimized jointly on shared mini-batches:
//! each student's loss mixes ground-truth cross-entropy with a mimicry term
//! toward the (detached) predicted distributions of its peers. The usual
//! regularizers — label smoothing, scheduled sampling, and SpecAugment-style
//! feature masking — compose with the mutual-learning objective, and a frozen
//! teacher-student distillation baseline is provided for comparison.
//!
//! Everything is built on a small dense-`f64` tensor type with reverse-mode
//! automatic differentiation ([`graph`]), so every objective is checkable
//! against central finite differences. All randomness flows through explicit
//! seeded generators ([`rng`]); identical configs reproduce identical runs
//! bit for bit regardless of worker count.
//!
//! This crate is `no_std` (alloc required) and holds no IO: file formats,
//! metrics sinks, and the command-line driver live in the companion
//! `mutualseq-cli` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
#[macro_use]
extern crate std;

pub mod augment;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
