//! Numerical laboratory for Markov chains on ℤ⁺ with asymptotically zero drift.
//!
//! The crate covers chain families with a prescribed Lamperti moment profile,
//! drift classification, exact stationary solvers, the harmonic function of
//! the chain killed on a boundary set, its Doob h-transform, Monte Carlo
//! verification of the limit theorems, and tail fitting.

// `!(x > 0.0)` guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod banded;
pub mod chain;
pub mod error;
pub mod harmonic;
pub mod htransform;
pub mod lyapunov;
pub mod mc;
pub mod pipeline;
pub mod quad;
pub mod stationary;

pub use error::{Error, Result};
