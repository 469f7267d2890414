//! Social optimum and Nash equilibrium solves.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::condensed::solve_condensed;
use super::game::{build_equilibrium_mcp, build_optimum_kkt, Concept, GameMcp};
use super::mcp::{solve_mcp, McpOptions, McpSolution};
use super::problem::ControlProblem;
use crate::error::{Error, Result};
use crate::io::write_csv;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// Largest stationarity violation after the bound multipliers are
    /// taken from `F`.
    pub stationarity: f64,
    pub complementarity: f64,
    /// Dynamics and box violations.
    pub feasibility: f64,
    /// Fischer–Burmeister residual norm.
    pub fb: f64,
    /// Most negative bound multiplier (zero when all are nonnegative).
    pub min_multiplier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub iterations: usize,
    pub wall_time: f64,
    pub regularized_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameSolution {
    pub concept: Concept,
    /// `T × m`.
    pub controls: DMatrix<f64>,
    /// `(T+1) × n`, starting at `ψ0`.
    pub states: DMatrix<f64>,
    /// Dynamics multipliers, `T × n`.
    pub lambda: DMatrix<f64>,
    /// Multipliers of the state box for `ψ_1..ψ_T`, `T × n` (zero on
    /// unbounded components).
    pub mu_state_max: DMatrix<f64>,
    pub mu_state_min: DMatrix<f64>,
    pub mu_u_max: DMatrix<f64>,
    pub mu_u_min: DMatrix<f64>,
    pub objectives: Vec<f64>,
    pub rms_controls: Vec<f64>,
    pub residuals: Residuals,
    pub stats: SolverStats,
    /// Relative objective gap to the condensed QP (optimum only).
    pub condensed_gap: Option<f64>,
    /// Raw MCP variables, usable as a warm start.
    pub z: DVector<f64>,
}

/// Compact summary written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionSummary {
    pub concept: Concept,
    pub objectives: Vec<f64>,
    pub total: f64,
    pub rms_controls: Vec<f64>,
    pub residuals: Residuals,
    pub stats: SolverStats,
    pub condensed_gap: Option<f64>,
}

impl GameSolution {
    pub fn total(&self) -> f64 {
        self.objectives.iter().sum()
    }

    pub fn summary(&self) -> SolutionSummary {
        SolutionSummary {
            concept: self.concept,
            objectives: self.objectives.clone(),
            total: self.total(),
            rms_controls: self.rms_controls.clone(),
            residuals: self.residuals,
            stats: self.stats,
            condensed_gap: self.condensed_gap,
        }
    }

    /// Controls and lifted states per step, one row per `t = 0..T` (the
    /// last control row is empty and written as NaN).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let (steps, m, n) = (self.controls.nrows(), self.controls.ncols(), self.states.ncols());
        let mut cols = vec!["t".to_string()];
        cols.extend((0..m).map(|c| format!("u{c}")));
        cols.extend((0..n).map(|r| format!("psi{r}")));
        let mut rows = DMatrix::from_element(steps + 1, 1 + m + n, f64::NAN);
        for t in 0..=steps {
            rows[(t, 0)] = t as f64;
            if t < steps {
                rows.view_mut((t, 1), (1, m)).copy_from(&self.controls.row(t));
            }
            rows.view_mut((t, 1 + m), (1, n)).copy_from(&self.states.row(t));
        }
        write_csv(path, &cols, &rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub mcp: McpOptions,
    /// Compare the optimum against the condensed QP.
    pub cross_check: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            mcp: McpOptions::default(),
            cross_check: true,
        }
    }
}

fn extract(p: &ControlProblem, game: &GameMcp, sol: &McpSolution) -> GameSolution {
    let lay = game.layout;
    let (n, m, horizon) = (lay.n, lay.m, lay.horizon);
    let mcp = &game.mcp;
    let z = &sol.z;
    let mut controls = DMatrix::zeros(horizon, m);
    let mut states = DMatrix::zeros(horizon + 1, n);
    let mut lambda = DMatrix::zeros(horizon, n);
    states.row_mut(0).copy_from(&p.psi0.transpose());
    for t in 0..horizon {
        for c in 0..m {
            controls[(t, c)] = z[lay.u(t, c)];
        }
        for r in 0..n {
            lambda[(t, r)] = z[lay.lambda(t, r)];
            states[(t + 1, r)] = z[lay.psi(t + 1, r)];
        }
    }

    // bound multipliers from F: F = μ_min − μ_max on primal rows
    let mut stationarity: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    let mut box_violation: f64 = 0.0;
    let mut min_multiplier: f64 = 0.0;
    let mut split = |i: usize| -> (f64, f64) {
        let (f, l, u) = (sol.f[i], mcp.lower[i], mcp.upper[i]);
        let mu_min = if l.is_finite() { f.max(0.0) } else { 0.0 };
        let mu_max = if u.is_finite() { (-f).max(0.0) } else { 0.0 };
        stationarity = stationarity.max((f - mu_min + mu_max).abs());
        if l.is_finite() {
            complementarity = complementarity.max((mu_min * (z[i] - l)).abs());
            box_violation = box_violation.max(l - z[i]);
        }
        if u.is_finite() {
            complementarity = complementarity.max((mu_max * (u - z[i])).abs());
            box_violation = box_violation.max(z[i] - u);
        }
        min_multiplier = min_multiplier.min(mu_min).min(mu_max);
        (mu_min, mu_max)
    };
    let mut mu_state_max = DMatrix::zeros(horizon, n);
    let mut mu_state_min = DMatrix::zeros(horizon, n);
    let mut mu_u_max = DMatrix::zeros(horizon, m);
    let mut mu_u_min = DMatrix::zeros(horizon, m);
    for t in 0..horizon {
        for c in 0..m {
            let (lo, hi) = split(lay.u(t, c));
            mu_u_min[(t, c)] = lo;
            mu_u_max[(t, c)] = hi;
        }
        for r in 0..n {
            let (lo, hi) = split(lay.psi(t + 1, r));
            mu_state_min[(t, r)] = lo;
            mu_state_max[(t, r)] = hi;
        }
    }
    let mut dynamics: f64 = 0.0;
    for t in 0..horizon {
        let next = p.system.step(&states.row(t).transpose(), &controls.row(t).transpose());
        dynamics = dynamics.max((next - states.row(t + 1).transpose()).amax());
    }

    let objectives = p.objectives(&states, &controls);
    let rms_controls = p
        .system
        .control_ranges
        .iter()
        .map(|r| {
            let block = controls.columns(r.start, r.len());
            (block.norm_squared() / (block.len().max(1)) as f64).sqrt()
        })
        .collect();
    GameSolution {
        concept: game.concept,
        controls,
        states,
        lambda,
        mu_state_max,
        mu_state_min,
        mu_u_max,
        mu_u_min,
        objectives,
        rms_controls,
        residuals: Residuals {
            stationarity,
            complementarity,
            feasibility: dynamics.max(box_violation.max(0.0)),
            fb: sol.residual,
            min_multiplier,
        },
        stats: SolverStats {
            iterations: sol.iterations,
            wall_time: sol.wall_time,
            regularized_steps: sol.regularized_steps,
        },
        condensed_gap: None,
        z: sol.z.clone(),
    }
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// Centralized optimum of the summed objective.
pub fn solve_optimum(problem: &ControlProblem, opts: &SolveOptions) -> Result<GameSolution> {
    let game = build_optimum_kkt(problem)?;
    let sol = solve_mcp(&game.mcp, &opts.mcp, None)?;
    let mut out = extract(problem, &game, &sol);
    if opts.cross_check {
        let qp = solve_condensed(problem, 1e-9)?;
        let gap = relative_gap(qp.objective, out.total());
        if gap > 1e-6 {
            warn!(
                "condensed QP objective {:.10e} differs from the MCP optimum {:.10e} (relative {gap:.2e})",
                qp.objective,
                out.total()
            );
        }
        out.condensed_gap = Some(gap);
    }
    Ok(out)
}

/// Nash equilibrium, optionally warm-started from another solution of the
/// same problem (typically the optimum).
pub fn solve_equilibrium(
    problem: &ControlProblem,
    warm_start: Option<&GameSolution>,
    opts: &SolveOptions,
) -> Result<GameSolution> {
    let game = build_equilibrium_mcp(problem)?;
    let z0 = match warm_start {
        Some(w) if w.z.len() != game.mcp.dim() => {
            return Err(Error::dims("warm start", game.mcp.dim(), w.z.len()));
        }
        Some(w) => Some(&w.z),
        None => None,
    };
    let sol = solve_mcp(&game.mcp, &opts.mcp, z0)?;
    Ok(extract(problem, &game, &sol))
}
