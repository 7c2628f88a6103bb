//! Simulator for nonlocal logistic equations driven by the fractional
//! p-Laplacian on boxes in one and two dimensions.

// `!(x > 0.0)` is the NaN-rejecting form used by every parameter check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diagnostics;
pub mod eigen;
pub mod elliptic;
pub mod error;
pub mod grid;
pub mod io;
pub mod nonlocal_op;
pub mod optim;
pub mod parabolic;
pub mod quadrature;

pub use error::{Error, Result};
