//! Desk-scale laboratory for cross-modal transferable adversarial attacks on
//! a simulated multimodal retrieval-augmented generation (RAG) stack.
//!
//! The library builds a complete, reproducible miniature of the attack
//! surface: small aligned image/text encoder pairs stand in for production
//! retrievers, a brute-force cosine index plus a rule-based generation stub
//! stands in for the RAG victim, and the attack side implements a
//! multi-positive InfoNCE objective, surrogate-ensemble averaging, an
//! invariant-risk-minimization (IRM) gradient-variance penalty with exact
//! second-order gradients, a dual-loop momentum-sign optimizer, and the
//! ENS/SVRE ensemble baselines, along with input-transformation defenses and
//! ASR / retrieval-drift metrics.
//!
//! Start with the runnable examples (`cargo run --example …`); each one
//! demonstrates a single capability end to end. The `medusa-lab` binary
//! wraps the same library functions behind campaign-oriented subcommands.

pub mod attack;
pub mod campaign;
pub mod corpus;
pub mod data;
pub mod defenses;
pub mod encoders;
pub mod error;
pub mod io;
pub mod numkit;
pub mod ragsim;
pub mod verify;

pub use error::{Error, Result};
pub use numkit::{cosine_sim, project_lp, NormOrder, Rng, Tape, Tensor};
