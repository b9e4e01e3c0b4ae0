//! Reversible transformer language models.
//!
//! The crate provides three reversible layer updates (midpoint, leapfrog and
//! a Hamiltonian staggered update) alongside the usual residual baseline, a
//! training engine that backpropagates through reversible stacks by
//! reconstructing hidden states instead of storing them, linear stability
//! tooling for two-term recurrences, and a procedure that converts a trained
//! residual model into an approximately equivalent reversible one.

pub mod blocks;
pub mod data;
pub mod engine;
pub mod error;
pub mod numerics;
pub mod retrofit;
pub mod stability;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{DType, Rng, Scalar, Tensor};
