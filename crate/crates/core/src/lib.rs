//! Feature-space encryption with normalizing flows.
//!
//! Data are mapped through an invertible flow to an approximately Gaussian
//! feature space, rotated by a secret Haar-uniform orthogonal key, and mapped
//! back. The crate also carries the tooling to audit that scheme: total
//! variation estimators, a rotation-recovery adversary, and a
//! gradient-leakage attack simulator.

pub mod crypt;
pub mod datasets;
pub mod error;
pub mod flow;
pub mod format;
pub mod leakage;
pub mod linalg;
pub mod logistic;
pub mod rng;
pub mod security;
pub mod train;

pub use error::{Error, Result};
