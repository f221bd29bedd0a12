//! Alignment-based adversarial training laboratory.
//!
//! End-to-end pieces for training robust multi-channel time-series
//! classifiers: per-domain Euclidean alignment (batch and incremental),
//! a small reverse-mode autodiff engine sized for CPU-scale CNNs,
//! l-infinity attack synthesis (FGSM, PGD, a black-box square-style
//! search, and a worst-case ensemble), min-max adversarial training,
//! balanced-accuracy evaluation protocols, and a synthetic multi-domain
//! epoch generator with a binary on-disk corpus format.

pub mod alignment;
pub mod attacks;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod graph;
pub mod models;
pub mod par;
pub mod rng;
pub mod symlinalg;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
