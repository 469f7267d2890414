//! Finite-horizon games on the lifted linear dynamics: the centralized
//! optimum and the open-loop Nash equilibrium, both solved as affine MCPs.

mod condensed;
mod cost;
mod game;
mod mcp;
mod problem;
mod solve;

pub use condensed::{solve_condensed, CondensedSolution};
pub use cost::{build_cost, CostModel};
pub use game::{
    build_equilibrium_mcp, build_optimum_kkt, check_coupling_identity, coupling_entries, Concept, GameMcp, Layout,
};
pub use mcp::{fb_residual, solve_mcp, AffineMcp, McpOptions, McpSolution};
pub use problem::{baseline_rollout, ControlProblem, Interval};
pub use solve::{solve_equilibrium, solve_optimum, GameSolution, Residuals, SolutionSummary, SolveOptions, SolverStats};
