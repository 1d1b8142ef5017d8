//! Growth-based dynamic rank allocation for per-expert LoRA adapters in a
//! mixture-of-experts network.
//!
//! Every expert owns two masked low-rank adapters (up and down projection)
//! that start at `r_init` active dimensions and grow toward a per-layer
//! budget of `N × r_target`. Growth is driven by an expert saliency score
//! that combines a routing-frequency EMA with a rank-normalized
//! gradient-weight importance EMA, discounted by a `(r + 1)^γ` penalty.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense matrices, top-k gating, AdamW, deterministic RNG and
//!   finite-difference gradient checking.
//! - [`adapters`]: the masked adapter with function-preserving growth.
//! - [`model`]: the desk-scale MoE network, its hand-derived backward pass and
//!   the synthetic specialization task.
//! - [`saliency`]: routing frequency, rank sensitivity/importance and the
//!   saliency score.
//! - [`allocator`]: growth schedule, per-event caps and the four allocation
//!   strategies.
//! - [`trainer`]: the training loop, run logs and checkpoints.
//! - [`analysis`]: Gini, expert masking, covariance gap, FLOPs and rank
//!   evolution export.
//! - [`config`]: the experiment configuration file format.

pub mod adapters;
pub mod allocator;
pub mod analysis;
pub mod config;
pub mod error;
pub mod model;
pub mod numerics;
pub mod saliency;
pub mod trainer;

pub use error::{Error, Result};
