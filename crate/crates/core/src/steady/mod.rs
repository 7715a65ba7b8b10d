//! Steady-state power flow and initialization of the dynamic state.

mod init;
mod powerflow;

pub use init::{init_dynamics, source_dispatch, MAX_INIT_LOADING};
pub use powerflow::{
    solve_power_flow, PowerFlowProblem, PowerFlowSolution, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SteadyError {
    #[error("network splits into {islands} islands; power flow needs one")]
    Disconnected { islands: usize },
    #[error("voltage collapse at iteration {iteration}: {detail}")]
    VoltageCollapse { iteration: usize, detail: String },
    #[error("no convergence after {iterations} iterations (max mismatch {max_mismatch:.3e} p.u.)")]
    NotConverged {
        iterations: usize,
        max_mismatch: f64,
    },
    #[error("source `{id}` loaded to {loading:.2} p.u. of its rating at the operating point")]
    SourceOverloaded { id: String, loading: f64 },
    #[error("power flow solution does not match the model ({0})")]
    Mismatch(String),
    #[error(transparent)]
    Network(#[from] crate::dynamics::DynamicsError),
}
