//! Numeric kernel: tensors, deterministic randomness, reverse-mode autodiff
//! with tangent support, and finite-difference verification oracles.

pub mod check;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use check::{fd_gradient, max_rel_error};
pub use rng::Rng;
pub use tape::{Gradients, NodeId, Tape, NORMALIZE_GUARD};
pub use tensor::{cosine_sim, project_lp, sign, NormOrder, Tensor};
