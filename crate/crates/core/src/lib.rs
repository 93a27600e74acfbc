//! Post-training low-rank compression of residual-MLP weight matrices.
//!
//! Each weight matrix is replaced by two thin factors from a (optionally
//! whitened) truncated SVD. The factors are then refit alternately against
//! the calibration-data loss `||U Vt X - W X||_F^2` ([`adacomp`]), and the
//! rank of each block is set from how strongly the block changes its input
//! ([`adacr`]). [`pipeline`] runs the whole sequence; [`cli`] wraps it.

pub mod adacomp;
pub mod adacr;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod model_io;
pub mod pipeline;

pub use error::{Error, Result};
