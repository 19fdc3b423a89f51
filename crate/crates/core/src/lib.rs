//! Jacobians of fixed points of iterative algorithms.
//!
//! An algorithm is a map `x_{k+1} = F(x_k, θ)` converging to `x̄(θ)`. This crate
//! estimates `∂x̄/∂θ` by unrolled (forward-mode) differentiation, implicit
//! differentiation, and one-step differentiation, which differentiates only the
//! last iteration. It also evaluates a-priori error bounds for these
//! estimators and runs hypergradient descent on bilevel problems.
// `!(x > 0.0)` deliberately rejects NaN; dense kernels index by position.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bilevel;
pub mod bounds;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod fixed_point;
pub mod linalg;
pub mod problems;

pub use error::{Error, Result};
pub use fixed_point::{AlgorithmMap, IterationTrace};
pub use linalg::{Matrix, Vector};
