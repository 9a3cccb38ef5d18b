//! Energy-optimal vehicle trajectories through an intersection control zone.
//!
//! A vehicle approaching an intersection must cross a fixed control zone in a
//! scheduled time while minimizing control effort (½∫u² dt) subject to
//! acceleration bounds, speed bounds, and — when a preceding vehicle is
//! present — a rear-end safety constraint that keeps the headway above a
//! speed-dependent safe distance. The optimum is a sequence of analytic arcs:
//! cubic-position unconstrained segments, saturated-control segments,
//! constant-speed segments, and safety-constrained segments that track the
//! leader. This crate computes that arc sequence in closed form, verifies it
//! against an independent direct-transcription quadratic program, and ships a
//! simulator for a set of reference driving scenarios.
//!
//! Module map:
//! - [`domain`]: vehicle parameters, boundary conditions, scenarios, validation.
//! - [`lead`]: piecewise-polynomial leader profiles and their exact kinematics.
//! - [`arcs`]: the analytic arc types and their closed-form evaluation.
//! - [`stitcher`]: junction systems, violation detection, and the arc-piecing
//!   solver that assembles complete trajectories.
//! - [`oracle`]: forward-Euler transcription and a dense dual active-set QP
//!   used as an independent check on the analytic solver.
//! - [`sim`]: reference scenario presets, single-run and chain execution, summaries.
//! - [`cli`]: command-line front end (scenario ingestion, CSV/JSON export).

// Validation guards are written `!(x > 0.0)` on purpose: unlike `x <= 0.0`
// they also reject NaN, which must never slip past a validator.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arcs;
pub mod cli;
pub mod domain;
pub mod lead;
pub mod oracle;
pub mod sim;
pub mod stitcher;
