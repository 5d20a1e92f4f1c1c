//! Numerical laboratory for adaptive-clustering MoE routing.
//!
//! The crate provides, at desk scale:
//!
//! - a feature-weighted clustering solver (per-cluster feature weights via a
//!   Lagrangian root solve) in [`wclust`];
//! - the adaptive-clustering router transform and every routing rule
//!   (standard top-k, transformed top-k, weight mixing, top-p, random
//!   ablation) in [`router`];
//! - a small trainable MoE stack with hand-derived gradients, an auxiliary
//!   load-balancing loss, and Adam in [`moe`];
//! - Gaussian-mixture misassignment simulations and Hessian-conditioning
//!   checks in [`gmmlab`];
//! - load-balance / routing-stability / overhead diagnostics in [`metrics`];
//! - a config-driven experiment runner in [`cli`], exposed by the `acmoe`
//!   binary.

pub mod cli;
pub mod error;
pub mod gmmlab;
pub mod metrics;
pub mod moe;
pub mod numerics;
pub mod router;
pub mod wclust;

pub use error::{Error, Result};
