//! Multiagent taxi routing on a street graph.
//!
//! The crate models a fleet of single-rider vehicles serving stochastically
//! arriving requests as a finite-horizon dynamic program and provides:
//!
//! - [`graph`]: street topology with all-pairs shortest paths,
//! - [`demand`]: categorical demand models, estimation and sampling,
//! - [`dynamics`]: state, controls, transition, stage cost and episodes,
//! - [`policy`]: greedy routing, one-agent-at-a-time rollout and online play,
//! - [`approximator`]: graph-convolution policy networks trained on rollout
//!   labels,
//! - [`ambiguity`]: Wasserstein distance, q-valid radius and model switching,
//! - [`benchmarks`]: instantaneous assignment, two-step stochastic
//!   assignment and the full-information oracle,
//! - [`harness`]: experiment orchestration, normalization and trace audits.

pub mod error;
pub mod graph;
pub mod demand;
pub mod ambiguity;
pub mod approximator;
pub mod benchmarks;
pub mod dynamics;
pub mod harness;
pub mod policy;
pub mod seeding;

pub use error::{Error, Result};
