//! Dense linear algebra, gating, optimization and RNG substrate.
//!
//! Everything runs in `f64`. Gradients elsewhere in the crate are derived by
//! hand and validated against [`finite_diff_check`].

mod gating;
mod gradcheck;
mod matrix;
mod optim;
mod rng;

pub use gating::{softmax, softmax_topk, softmax_topk_masked};
pub use gradcheck::finite_diff_check;
pub use matrix::{matmul, Matrix};
pub(crate) use matrix::dot as matrix_dot;
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use rng::{Rng, RngState};
