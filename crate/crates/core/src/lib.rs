//! Adaptive per-electrode acquisition for wireless neural headstages.
//!
//! A server-side predictor estimates spike-detection error for candidate
//! (sample rate, threshold) pairs from each electrode's spike template; an
//! optimizer picks the lowest rate that fits an error budget; the headstage
//! enforces it with modulo-gated sampling rounds, conditions the acquired
//! samples and ships only detected events. Transform-coding baselines and an
//! evaluation harness measure compression against detection error.

// NaN-rejecting checks are written as `!(x > 0.0)` throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod baselines;
pub mod evaluation;
pub mod exec;
pub mod optimizer;
pub mod predictor;
pub mod signal;
pub mod synth;
pub mod telemetry;

pub use exec::Execution;
