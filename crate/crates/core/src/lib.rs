//! Tagged-particle and current fluctuations of the one-dimensional
//! symmetric simple exclusion process.

// Negated comparisons are the NaN-rejecting range guards.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod lattice;
pub mod observables;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod variational;

pub use error::{Error, Result};
