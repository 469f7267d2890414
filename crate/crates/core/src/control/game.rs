//! Stacked optimality systems of the social optimum and the Nash
//! equilibrium as affine MCPs.
//!
//! Variables are ordered per time block `t = 0..T−1` as
//! `[u_t, λ_t, ψ_{t+1}]`, which keeps the system banded.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::mcp::AffineMcp;
use super::problem::ControlProblem;
use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Concept {
    Optimum,
    Equilibrium,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub horizon: usize,
    /// Lifted state dimension.
    pub n: usize,
    /// Control dimension.
    pub m: usize,
}

impl Layout {
    pub fn block(&self) -> usize {
        self.m + 2 * self.n
    }

    pub fn dim(&self) -> usize {
        self.horizon * self.block()
    }

    pub fn u(&self, t: usize, c: usize) -> usize {
        t * self.block() + c
    }

    pub fn lambda(&self, t: usize, r: usize) -> usize {
        t * self.block() + self.m + r
    }

    /// Index of `ψ_t` for `t = 1..=T`.
    pub fn psi(&self, t: usize, r: usize) -> usize {
        debug_assert!(t >= 1);
        (t - 1) * self.block() + self.m + self.n + r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameMcp {
    pub concept: Concept,
    pub mcp: AffineMcp,
    pub layout: Layout,
}

fn owners(ranges: &[std::ops::Range<usize>], dim: usize) -> Vec<usize> {
    let mut o = vec![0; dim];
    for (k, r) in ranges.iter().enumerate() {
        for i in r.clone() {
            o[i] = k;
        }
    }
    o
}

fn build(p: &ControlProblem, concept: Concept) -> Result<GameMcp> {
    p.validate()?;
    let s = &p.system;
    let (n, m, horizon) = (s.state_dim(), s.control_dim(), p.horizon);
    let lay = Layout { horizon, n, m };
    let own_x = owners(&s.state_ranges, n);
    let own_u = owners(&s.control_ranges, m);
    let coupled = concept == Concept::Optimum;
    let mut trip = Vec::new();
    let mut q = DVector::zeros(lay.dim());

    for t in 0..horizon {
        // stationarity in u_t: ∇_u ℓ_k + Bᵀ λ_t
        for c in 0..m {
            let k = own_u[c];
            let (sr, cr) = (&s.state_ranges[k], &s.control_ranges[k]);
            let cost = &p.costs[k];
            let row = lay.u(t, c);
            let lc = cost.nx + c - cr.start;
            for j in 0..cost.nx {
                let v = 2.0 * cost.q[(lc, j)];
                if v == 0.0 {
                    continue;
                }
                if t == 0 {
                    q[row] += v * p.psi0[sr.start + j];
                } else {
                    trip.push((row, lay.psi(t, sr.start + j), v));
                }
            }
            for j in 0..cost.nu {
                let v = 2.0 * cost.q[(lc, cost.nx + j)];
                if v != 0.0 {
                    trip.push((row, lay.u(t, cr.start + j), v));
                }
            }
            q[row] += cost.c[lc];
            for r in 0..n {
                let v = s.b[(r, c)];
                if v != 0.0 && (coupled || own_x[r] == k) {
                    trip.push((row, lay.lambda(t, r), v));
                }
            }
        }
        // dynamics: ψ_{t+1} − A ψ_t − B u_t = 0
        for r in 0..n {
            let row = lay.lambda(t, r);
            trip.push((row, lay.psi(t + 1, r), 1.0));
            for j in 0..n {
                let v = s.a[(r, j)];
                if v == 0.0 {
                    continue;
                }
                if t == 0 {
                    q[row] -= v * p.psi0[j];
                } else {
                    trip.push((row, lay.psi(t, j), -v));
                }
            }
            for c in 0..m {
                let v = s.b[(r, c)];
                if v != 0.0 {
                    trip.push((row, lay.u(t, c), -v));
                }
            }
        }
        // stationarity in ψ_{t+1}: ∇_ψ ℓ_k − λ_t + Aᵀ λ_{t+1}
        for r in 0..n {
            let k = own_x[r];
            let row = lay.psi(t + 1, r);
            trip.push((row, lay.lambda(t, r), -1.0));
            if t + 1 == horizon {
                continue;
            }
            let (sr, cr) = (&s.state_ranges[k], &s.control_ranges[k]);
            let cost = &p.costs[k];
            let lr = r - sr.start;
            for j in 0..cost.nx {
                let v = 2.0 * cost.q[(lr, j)];
                if v != 0.0 {
                    trip.push((row, lay.psi(t + 1, sr.start + j), v));
                }
            }
            for j in 0..cost.nu {
                let v = 2.0 * cost.q[(lr, cost.nx + j)];
                if v != 0.0 {
                    trip.push((row, lay.u(t + 1, cr.start + j), v));
                }
            }
            q[row] += cost.c[lr];
            for j in 0..n {
                let v = s.a[(j, r)];
                if v != 0.0 && (coupled || own_x[j] == k) {
                    trip.push((row, lay.lambda(t + 1, j), v));
                }
            }
        }
    }

    let dim = lay.dim();
    let mut lower = DVector::from_element(dim, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(dim, f64::INFINITY);
    for t in 0..horizon {
        for c in 0..m {
            lower[lay.u(t, c)] = p.control_box.lo;
            upper[lay.u(t, c)] = p.control_box.hi;
        }
        for &r in &p.bounded_states {
            lower[lay.psi(t + 1, r)] = p.state_box.lo;
            upper[lay.psi(t + 1, r)] = p.state_box.hi;
        }
    }
    Ok(GameMcp {
        concept,
        mcp: AffineMcp {
            m: CsrMatrix::from_triplets(dim, dim, trip),
            q,
            lower,
            upper,
        },
        layout: lay,
    })
}

/// KKT system of the summed objective, including the cross-agent terms
/// `Σ_{j≠i} A_jiᵀ λ_{j,t}` in every state stationarity row.
pub fn build_optimum_kkt(problem: &ControlProblem) -> Result<GameMcp> {
    build(problem, Concept::Optimum)
}

/// Per-agent KKT systems stacked into one MCP. Each agent uses its own
/// cost, dynamics multiplier and bounds; rivals' states enter only through
/// the shared dynamics.
pub fn build_equilibrium_mcp(problem: &ControlProblem) -> Result<GameMcp> {
    build(problem, Concept::Equilibrium)
}

/// The cross-agent coupling entries `(row, col, value)`: in the row of
/// `ψ_{i,t}` and column of `λ_{j,t}` (`j ≠ i`), the value `A_ji` transposed.
pub fn coupling_entries(problem: &ControlProblem) -> Vec<(usize, usize, f64)> {
    let s = &problem.system;
    let lay = Layout {
        horizon: problem.horizon,
        n: s.state_dim(),
        m: s.control_dim(),
    };
    let mut out = Vec::new();
    for t in 1..problem.horizon {
        for (i, ri) in s.state_ranges.iter().enumerate() {
            for (j, rj) in s.state_ranges.iter().enumerate() {
                if i == j {
                    continue;
                }
                for r in ri.clone() {
                    for c in rj.clone() {
                        let v = s.a[(c, r)];
                        if v != 0.0 {
                            out.push((lay.psi(t, r), lay.lambda(t, c), v));
                        }
                    }
                }
            }
        }
    }
    out.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    out
}

/// Check that the optimum and equilibrium systems differ exactly, bit for
/// bit, by the coupling entries.
pub fn check_coupling_identity(problem: &ControlProblem, optimum: &GameMcp, equilibrium: &GameMcp) -> Result<()> {
    let (a, b) = (&optimum.mcp, &equilibrium.mcp);
    let same_bits = |x: &DVector<f64>, y: &DVector<f64>| {
        x.len() == y.len() && x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
    };
    if !same_bits(&a.q, &b.q) || !same_bits(&a.lower, &b.lower) || !same_bits(&a.upper, &b.upper) {
        return Err(Error::Config("optimum and equilibrium MCP differ outside the matrix".into()));
    }
    if a.m.nrows != b.m.nrows {
        return Err(Error::dims("equilibrium MCP", a.m.nrows, b.m.nrows));
    }
    let mut diff = BTreeMap::new();
    for r in 0..a.m.nrows {
        let ea: BTreeMap<usize, f64> = a.m.row(r).collect();
        let eb: BTreeMap<usize, f64> = b.m.row(r).collect();
        for (&c, &va) in &ea {
            match eb.get(&c) {
                Some(&vb) if vb.to_bits() == va.to_bits() => {}
                Some(&vb) => {
                    diff.insert((r, c), (va, Some(vb)));
                }
                None => {
                    diff.insert((r, c), (va, None));
                }
            }
        }
        for (&c, &vb) in &eb {
            if !ea.contains_key(&c) {
                diff.insert((r, c), (0.0, Some(vb)));
            }
        }
    }
    let expected = coupling_entries(problem);
    if diff.len() != expected.len() {
        return Err(Error::Config(format!(
            "MCP difference has {} entries, coupling has {}",
            diff.len(),
            expected.len()
        )));
    }
    for (r, c, v) in expected {
        match diff.get(&(r, c)) {
            Some(&(va, None)) if va.to_bits() == v.to_bits() => {}
            other => {
                return Err(Error::Config(format!(
                    "MCP difference at ({r}, {c}) is {other:?}, expected coupling value {v}"
                )))
            }
        }
    }
    Ok(())
}
