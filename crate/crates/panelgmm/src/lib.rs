//! Dynamic panel GMM estimation.
//!
//! This crate implements GMM estimators for the panel AR(1) model with
//! predetermined regressors,
//!
//! ```text
//! y_it = δ·y_{i,t−1} + x_itᵀ·α + η_i + v_it,
//! ```
//!
//! where the time-invariant effect `η_i` is removed by a transformation
//! matrix (first differences or forward orthogonal deviations), and the
//! transformed equations are instrumented period by period with lagged
//! predetermined variables. It covers:
//!
//! - one-step and two-step GMM on transformed equations ([`estimators`]),
//! - system GMM combining transformed and levels equations,
//! - an instrument-nesting check with a transfer-matrix construction that
//!   decides whether first-difference and FOD GMM coincide ([`instruments`]),
//! - a seeded, parallel Monte Carlo harness with bias/sd/rmse summaries
//!   ([`simulation`]),
//! - a config-driven experiment runner with CSV output ([`runner`]).

pub mod config;
pub mod error;
pub mod estimators;
pub mod instruments;
pub mod panel;
pub mod runner;
pub mod simulation;
pub mod transforms;

pub use error::{Error, Result};
pub use estimators::{
    equivalence_report, gmm_kernel, one_step, run_estimator, system_one_step, system_two_step,
    two_step, EquivalenceReport, EstimatorKind, EstimatorSpec, GmmEstimate, GmmStep,
    TransformFamily,
};
pub use instruments::{
    all_lags, build_block_diagonal, instrument_matrix, nesting_check, recent_lags,
    system_instruments, transfer_matrix, InstrumentMatrix, InstrumentScheme, NestingReport,
    NestingWitness, SystemInstrumentMatrix, TransferMatrixResult, DEFAULT_NESTING_TOL,
};
pub use panel::PanelData;
pub use simulation::{
    generate_panel, percent_reduction, rep_seed, run_battery, summarize, uniform_unit_variance,
    BatteryResult, CoefSummary, DesignPoint, ErrorModel, McSummary,
};
pub use transforms::{
    apply_transform, equivalent_transform, first_difference_matrix, fod_matrix, system_extend,
    upper_cholesky, CholeskyFactor, TransformKind, TransformMatrix,
};
