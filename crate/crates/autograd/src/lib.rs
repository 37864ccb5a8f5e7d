//! Reverse-mode automatic differentiation over dense, row-major `f64` matrices.
//!
//! Every value is a 2-D matrix (`Array2<f64>`); scalars are `1×1`. A [`Graph`]
//! records operations eagerly: each call computes its output immediately and
//! appends a node to the tape. [`Graph::backward`] then walks the tape in
//! reverse and accumulates gradients for every node that depends on a
//! trainable leaf.
//!
//! The op set is deliberately small and covers what a vision transformer with
//! metric-learning heads needs: dense products, broadcasting arithmetic,
//! row-wise normalizations, gathers/slices/concats and a 2-D `im2col` for
//! small convolutions.

mod gradcheck;
mod graph;

pub use gradcheck::{gradcheck, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use graph::{Gradients, Graph, Var};

/// Dense matrix type used throughout the tape.
pub type Matrix = ndarray::Array2<f64>;
