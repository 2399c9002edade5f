//! Online pointmap reconstruction with an uncertainty-aware dual memory.
//!
//! The crate is organised around the stages of the reconstruction loop:
//!
//! - [`geometry`]: rigid transforms, projection, PnP, focal recovery and
//!   epipolar (Sampson) error.
//! - [`memory`]: the short/long-term token bank with softmax retrieval,
//!   Sampson-based filtering and confidence pruning.
//! - [`losses`]: dynamics-aware flow loss, scale-invariant depth loss and
//!   confidence-aware regression loss, with analytic gradients and a
//!   finite-difference checker.
//! - [`synth`]: deterministic deforming scenes with full ground truth and an
//!   oracle predictor.
//! - [`pipeline`]: the per-frame online loop.
//! - [`metrics`]: depth and 5-frame pose evaluation.
//! - [`io`]: binary grids, TUM trajectories, datasets, configs and snapshots.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod pipeline;
pub mod synth;
