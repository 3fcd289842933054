//! Longitudinal simulator for heterogeneous heavy-truck platoons driven by
//! distributed, cooperative nonlinear model predictive control.
//!
//! The crate is organized around the pipeline of a closed-loop platooning
//! experiment:
//!
//! - [`powertrain`] — per-truck longitudinal vehicle, engine, gearbox, drag,
//!   rolling-resistance, and fuel models.
//! - [`road`] — grade profiles, synthetic test routes, and the sparse
//!   Legendre-series grade preview used by the controllers.
//! - [`nlp`] — a sparse SQP solver (Gauss-Newton Hessian, active-set QP
//!   subproblems) for the transcribed optimal control problems.
//! - [`ocp`] — direct multiple-shooting transcription of the solo,
//!   anticipative, and considerate (joint two-truck) motion planning problems.
//! - [`platoon`] — V2V message lifecycle and the per-truck controller
//!   variants (considerate, anticipative, classical CACC baseline).
//! - [`sim`] — the closed-loop scenario engine, disengagement logic, and
//!   per-run metrics.
//! - [`config`] — TOML scenario schema.
//! - [`batch`] — permutation batch experiments and plot-data emission.

pub mod batch;
pub mod config;
pub mod nlp;
pub mod ocp;
pub mod platoon;
pub mod powertrain;
pub mod road;
pub mod sim;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("fit did not converge (final residual {residual:.3e})")]
    FitDiverged { residual: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("simulation aborted: {0}")]
    Aborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
