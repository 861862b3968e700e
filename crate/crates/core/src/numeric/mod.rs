//! Dense kernels shared by every other module.
//!
//! All arithmetic is `f64`. There is no broadcasting: every binary operation
//! requires identical (or product-compatible) shapes and fails otherwise.

mod matrix;
mod rng;

pub use matrix::{matmul, softmax_rows, Matrix};
pub use rng::{randn_matrix, Rng};
