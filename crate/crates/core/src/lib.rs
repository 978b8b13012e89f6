//! Deterministic training and influence-function laboratory.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: dense kernels, Krylov solvers, eigensolvers and statistics.
//! - [`model`]: desk-scale differentiable models with exact derivatives.
//! - [`variation`]: perturbed losses `L_t(θ) + Σ_q ε_q l_{S_q}(θ)`.
//! - [`trainer`]: deterministic SGD, trajectories and checkpoints.
//! - [`influence`]: HIF, ABIF, TracIn and exact-trajectory ε-Jacobians.
//! - [`experiments`]: divergence, Gronwall, first-order validity and fading protocols.
//! - [`correction`]: few-step misprediction correction campaigns.

pub mod correction;
pub mod error;
pub mod experiments;
pub mod influence;
pub mod io;
pub mod model;
pub mod numkit;
pub mod seed;
pub mod trainer;
pub mod variation;

pub use error::{Error, Result};
