//! Deterministic laboratory for regressing model parameters of tasks that
//! have no labeled data.
//!
//! The crate trains banks of small encoder-decoder networks on a family of
//! synthetic image-patch tasks, aggregates simulated annotator votes into a
//! task-correlation matrix, trains a branched meta-network that maps known
//! task parameters plus correlations to the parameters of an unseen task,
//! and evaluates the regressed parameters against baselines and supervised
//! oracles.
//!
//! Everything in this crate is pure: every operation is a deterministic
//! function of its inputs (seeds included), values are immutable once built,
//! and repeated calls are bit-identical. All arithmetic is IEEE-754 binary64.
//! Scalar math routes through [`libm`] so the crate builds without `std`
//! (`alloc` is required).

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod bank;
pub mod basis;
pub mod consensus;
mod error;
pub mod math;
pub mod meta;
pub mod metrics;
pub mod nn;
pub mod rng;
mod sample;
pub mod world;

pub use error::{Error, Result};
pub use sample::Sample;
