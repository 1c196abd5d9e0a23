//! Robust viability kernels for a sampled, controlled Ross-Macdonald
//! dengue model under rectangular uncertainty, plus the least-squares
//! calibration pipeline that estimates the model from daily case data.
//!
//! The solver answers one question: from which initial states (infected
//! mosquito and human proportions) does some admissible fumigation strategy
//! keep the infected-human proportion below a cap for every day of the
//! horizon, whatever daily values the uncertain transmission rates take
//! inside a known rectangle? The answer, the robust viability kernel, is
//! computed by a backward min-max dynamic programming sweep over a grid
//! ([`robust_dp::backward_sweep`]), with the one-day flow map of the ODE in
//! [`dynamics`], the discretization and the conservative membership rule in
//! [`grid`], closed-loop simulation in [`strategy`], and parameter
//! estimation in [`estimation`].

pub mod dynamics;
pub mod error;
pub mod estimation;
pub mod grid;
pub mod robust_dp;
pub mod strategy;

pub use dynamics::{aggregate, flow_map_phi, rhs, AggregateRates, Control, ModelParams, State};
pub use error::{Error, Result};
pub use grid::{
    conservative_membership, enumerate_uncertainties, ControlGrid, Mode, StateGrid, UncertaintySet, ValueGrid,
};
pub use robust_dp::{
    backward_sweep, compare_kernels, corners_preflight, extract_kernel, kernel_boundary, DpSolution, Horizon,
    Kernel, SetRelation, SweepSpec,
};
pub use strategy::{
    random_scenario, simulate_closed_loop, violation_report, FeedbackStrategy, McSummary, Scenario, ScenarioMode,
    Trajectory,
};
