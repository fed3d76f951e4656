//! Fishing attacks against federated gradient aggregation.
//!
//! A malicious server can rewrite the classification head of a model before
//! shipping it to users so that the returned (averaged) gradient is dominated
//! by a single example. This crate carries the pure numerical side of that
//! story: a small MLP with exact backprop, the class and feature fishing
//! transforms, gradient mining (average-feature recovery, target counting,
//! analytic input inversion), the cross-device one-shot feature attack, the
//! cross-silo binary attacks and a fedSGD simulator with user-side defenses.
//!
//! The crate is `no_std` with `alloc`; file formats, the experiment driver
//! and the CLI live in the `gradfisher` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod crossdevice;
pub mod crosssilo;
mod error;
pub mod fedsim;
pub mod fishing;
pub mod linalg;
pub mod model;
pub mod recovery;
pub mod stats;

pub use error::{Error, Result};
pub use fishing::{FishingMode, FishingPlan};
pub use linalg::{Matrix, RandomSource, Vector};
pub use model::{Activation, Example, ForwardTrace, GradientUpdate, ModelParams};
