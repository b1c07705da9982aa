//! Helmholtz machines over binary units, trained with the wake-sleep family
//! (WS, RWS) and their natural-gradient variants (NWS, NRWS).
//!
//! The Fisher information matrix of a sigmoid belief network is exactly
//! block diagonal with one block per unit, sized by the unit's fan-in plus the
//! bias. [`fisher`] estimates those blocks from samples and inverts their
//! damped form through a rank-`n` Woodbury solve, so natural gradients cost
//! `O(l n^2)` per unit rather than `O(l^3)`.
//!
//! Modules:
//! - [`model`]: networks, ancestral sampling, exact log-masses, checkpoints.
//! - [`fisher`]: per-unit Fisher blocks, damping, Woodbury/dense solves, K-step reuse.
//! - [`trainers`]: importance weights, wake/sleep gradients, SGD/ADAM, training steps.
//! - [`eval`]: IS log-likelihood, exact marginals and KL by enumeration, finite differences.
//! - [`data`]: 3by3 distribution, IDX loading, binarization, miniMNIST pooling, batching.
//! - [`experiment`]: run configuration, metrics, sweeps (driven by the `helmholtz` binary).

pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod fisher;
pub mod linalg;
pub mod model;
pub mod trainers;

pub use error::{Error, Result};
