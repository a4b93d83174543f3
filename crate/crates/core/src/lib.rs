//! Optimal investment with equities and a rolling CDS under default risk,
//! for an exponential-utility investor.
//!
//! The crate evaluates the reduced Hamiltonians and optimal policies, solves
//! the certainty-equivalent PDEs by finite differences, prices defaultable
//! bonds by utility indifference and cross-checks everything with Monte Carlo.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// index loops mirror the matrix formulas; solver entry points take many inputs
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod affine_cir;
pub mod cds_curve;
pub mod config;
pub mod error;
pub mod experiments;
pub mod hamiltonian;
pub mod hjb;
pub mod model;
pub mod monte_carlo;
pub mod post_default;
pub mod pricing;
pub mod product_log;

pub use error::{Error, Result};
