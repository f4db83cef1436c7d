//! Numerical solver for the base capacity (free boundary) of a
//! finite-horizon, singular irreversible-investment problem, with an
//! independent optimal-stopping oracle, closed-form infinite-horizon
//! boundaries, and Monte Carlo policy / first-order-condition checks.

pub mod boundary;
pub mod error;
pub mod model;
pub mod numeric;
pub mod paths;
pub mod policy;
pub mod stopping_oracle;

pub use boundary::{
    boundary_residual, closed_form_boundary_infinite, general_r_boundary_infinite,
    solve_boundary_backward, upper_bound_curve, BoundaryCurve, BoundaryMethod, KnotDiagnostics,
    RootfindConfig,
};
pub use error::{CoreError, Result};
pub use model::{
    beta_roots, BetaRoots, CoefficientSnapshot, ModelParams, PiecewiseConstant, ProductionFunction,
};
pub use paths::{simulate_c0, simulate_c0_with, Measure, PathEnsemble, SimulationOptions, TimeGrid};
pub use policy::{
    evaluate_profit, profit_samples, supergradient, track, verify_foc, ControlledPath, FocConfig,
    FocProbe, FocReport, InvestmentPolicy, MonteCarloEstimate, Verdict,
};
pub use stopping_oracle::{
    cross_validate, default_ygrid, extract_boundary, solve_value_function, CrossValidationReport,
    OracleConfig, ValueSurface,
};
