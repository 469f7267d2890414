//! Finite-horizon control problems on the combined lifted dynamics.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cost::CostModel;
use crate::error::{Error, Result};
use crate::koopman::CombinedSystem;

/// Closed interval; infinite ends are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn free() -> Self {
        Interval {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    pub fn symmetric(h: f64) -> Self {
        Interval { lo: -h, hi: h }
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.lo - tol && v <= self.hi + tol
    }
}

impl Default for Interval {
    fn default() -> Self {
        Interval::symmetric(1.0)
    }
}

/// `min Σ_{t<T} ℓ_k(ψ_{k,t}, u_{k,t})` subject to `ψ_{t+1} = A ψ_t + B u_t`.
///
/// Stage costs run over `t = 0..T−1`; there is no terminal cost. The state
/// box applies to `bounded_states` (the raw components of every agent's
/// lifted slow state) at `t = 1..T`, the control box to every control.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProblem {
    pub system: CombinedSystem,
    pub horizon: usize,
    pub psi0: DVector<f64>,
    pub costs: Vec<CostModel>,
    pub state_box: Interval,
    pub control_box: Interval,
    /// Global indices into ψ of the bounded components, sorted.
    pub bounded_states: Vec<usize>,
}

impl ControlProblem {
    /// `raw_blocks[i]` are the raw-state positions inside agent `i`'s
    /// lifted block.
    pub fn new(
        system: CombinedSystem,
        costs: Vec<CostModel>,
        psi0: DVector<f64>,
        horizon: usize,
        state_box: Interval,
        control_box: Interval,
        raw_blocks: &[Range<usize>],
    ) -> Result<Self> {
        if raw_blocks.len() != system.n_agents() {
            return Err(Error::dims("raw state blocks", system.n_agents(), raw_blocks.len()));
        }
        let mut bounded = Vec::new();
        for (i, r) in raw_blocks.iter().enumerate() {
            let sr = &system.state_ranges[i];
            if r.end > sr.len() {
                return Err(Error::dims(format!("raw block of agent {i}"), sr.len(), r.end));
            }
            bounded.extend(r.clone().map(|k| sr.start + k));
        }
        let p = ControlProblem {
            system,
            horizon,
            psi0,
            costs,
            state_box,
            control_box,
            bounded_states: bounded,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        if self.horizon == 0 {
            return Err(Error::Config("control horizon must be at least 1".into()));
        }
        if self.psi0.len() != s.state_dim() {
            return Err(Error::dims("initial lifted state", s.state_dim(), self.psi0.len()));
        }
        if s.b.nrows() != s.state_dim() || s.a.ncols() != s.state_dim() {
            return Err(Error::dims("dynamics rows", s.state_dim(), s.b.nrows()));
        }
        if self.costs.len() != s.n_agents() {
            return Err(Error::dims("cost models", s.n_agents(), self.costs.len()));
        }
        for (i, c) in self.costs.iter().enumerate() {
            if c.nx != s.state_ranges[i].len() || c.nu != s.control_ranges[i].len() {
                return Err(Error::dims(
                    format!("cost model of agent {i}"),
                    s.state_ranges[i].len() + s.control_ranges[i].len(),
                    c.nx + c.nu,
                ));
            }
            c.validate()?;
        }
        for b in [self.state_box, self.control_box] {
            if b.lo.is_nan() || b.hi.is_nan() || b.lo > b.hi {
                return Err(Error::Config(format!("invalid box [{}, {}]", b.lo, b.hi)));
            }
        }
        if self.psi0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial lifted state".into()));
        }
        if self.bounded_states.iter().any(|&k| k >= s.state_dim()) {
            return Err(Error::Config("bounded state index out of range".into()));
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.system.n_agents()
    }

    /// Per-agent objectives of a trajectory: `states` is `(T+1) × n`
    /// starting at `ψ0`, `controls` is `T × m`.
    pub fn objectives(&self, states: &DMatrix<f64>, controls: &DMatrix<f64>) -> Vec<f64> {
        let s = &self.system;
        (0..self.n_agents())
            .map(|k| {
                let (sr, cr) = (&s.state_ranges[k], &s.control_ranges[k]);
                (0..self.horizon)
                    .map(|t| {
                        let psi = DVector::from_iterator(sr.len(), sr.clone().map(|j| states[(t, j)]));
                        let u = DVector::from_iterator(cr.len(), cr.clone().map(|j| controls[(t, j)]));
                        self.costs[k].eval(&psi, &u)
                    })
                    .sum()
            })
            .collect()
    }
}

/// Per-agent cost of the uncontrolled (`u = 0`) rollout. Bounds are not
/// enforced.
pub fn baseline_rollout(problem: &ControlProblem) -> Vec<f64> {
    let controls = DMatrix::zeros(problem.horizon, problem.system.control_dim());
    let states = problem
        .system
        .predict(&problem.psi0, &controls)
        .expect("validated problem dimensions");
    problem.objectives(&states, &controls)
}
