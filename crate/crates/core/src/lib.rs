//! Offline policy learning with deployment gating.
//!
//! The library learns a target policy from logged trajectories and, in the
//! same loop, estimates a high-confidence lower bound on its value with
//! off-policy estimators plus bootstrap resampling. A run is declared ready
//! for deployment only when the lower bound clears the value of the data
//! source itself.
//!
//! Module map:
//!
//! - [`mdp`] — the modified mountain-car environment, trajectory data model,
//!   and return computation.
//! - [`linear`] — tile coding and linear action-value / softmax policies.
//! - [`data`] — the simulated data source: behavior policy synthesis,
//!   trajectory collection, train/test splitting, dataset files.
//! - [`improve`] — offline policy improvement (behavioral cloning, double
//!   Q-learning, batch-constrained Q-learning).
//! - [`ope`] — off-policy point estimators (WIS, PDWIS, model-based, WDR)
//!   and diagnostics.
//! - [`bootstrap`] — trajectory-level bootstrap resampling and percentile /
//!   BCa lower bounds.
//! - [`harness`] — the train/test/gate loop, multi-run experiments, CSV and
//!   SVG outputs.

pub mod bootstrap;
pub mod data;
pub mod harness;
pub mod improve;
pub mod linear;
pub mod mdp;
pub mod ope;
pub mod rng;
