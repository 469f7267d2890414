//! Controls-only QP after eliminating the dynamics, solved by accelerated
//! projected gradient with an augmented Lagrangian for the state box.
//! Used as an independent check of the optimum MCP solution.

use nalgebra::{DMatrix, DVector};

use super::problem::ControlProblem;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CondensedSolution {
    pub controls: DMatrix<f64>,
    pub objective: f64,
    pub max_violation: f64,
    pub iterations: usize,
}

struct Condensed {
    h: DMatrix<f64>,
    g: DVector<f64>,
    c: DMatrix<f64>,
    d: DVector<f64>,
}

fn condense(p: &ControlProblem) -> Condensed {
    let s = &p.system;
    let (n, m, horizon) = (s.state_dim(), s.control_dim(), p.horizon);
    let nv = horizon * m;
    let mut qf = DMatrix::zeros(n + m, n + m);
    let mut cf = DVector::zeros(n + m);
    for (k, cost) in p.costs.iter().enumerate() {
        let idx: Vec<usize> = s.state_ranges[k]
            .clone()
            .chain(s.control_ranges[k].clone().map(|c| n + c))
            .collect();
        for (a, &ia) in idx.iter().enumerate() {
            cf[ia] += cost.c[a];
            for (b, &ib) in idx.iter().enumerate() {
                qf[(ia, ib)] += cost.q[(a, b)];
            }
        }
    }
    let mut h = DMatrix::zeros(nv, nv);
    let mut g = DVector::zeros(nv);
    let nb = p.bounded_states.len();
    let mut c = DMatrix::zeros(horizon * nb, nv);
    let mut d = DVector::zeros(horizon * nb);

    // ψ_t = phi + gamma U
    let mut phi = p.psi0.clone();
    let mut gamma = DMatrix::zeros(n, nv);
    for t in 0..horizon {
        let mut l = DMatrix::zeros(n + m, nv);
        l.rows_mut(0, n).copy_from(&gamma);
        for j in 0..m {
            l[(n + j, t * m + j)] = 1.0;
        }
        let mut l0 = DVector::zeros(n + m);
        l0.rows_mut(0, n).copy_from(&phi);
        let ql = &qf * &l;
        h += l.transpose() * &ql * 2.0;
        g += l.transpose() * (&qf * &l0 * 2.0 + &cf);

        gamma = &s.a * &gamma;
        for j in 0..m {
            let mut col = gamma.column_mut(t * m + j);
            col += s.b.column(j);
        }
        phi = &s.a * &phi;
        for (r, &k) in p.bounded_states.iter().enumerate() {
            c.row_mut(t * nb + r).copy_from(&gamma.row(k));
            d[t * nb + r] = phi[k];
        }
    }
    Condensed {
        h: (&h + h.transpose()) * 0.5,
        g,
        c,
        d,
    }
}

fn lambda_max(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone().symmetric_eigen().eigenvalues.max().max(0.0)
}

/// Solve the condensed QP. `tol` bounds the final state-box violation.
pub fn solve_condensed(p: &ControlProblem, tol: f64) -> Result<CondensedSolution> {
    p.validate()?;
    let qp = condense(p);
    let nv = qp.g.len();
    let (lo, hi) = (p.state_box.lo, p.state_box.hi);
    let (ulo, uhi) = (p.control_box.lo, p.control_box.hi);
    let project = |v: &mut DVector<f64>| v.apply(|x| *x = x.clamp(ulo, uhi));
    let lh = lambda_max(&qp.h);
    let lc = lambda_max(&(qp.c.transpose() * &qp.c));
    let constrained = qp.c.nrows() > 0 && (lo.is_finite() || hi.is_finite());

    let mut y_hi: DVector<f64> = DVector::zeros(qp.c.nrows());
    let mut y_lo: DVector<f64> = DVector::zeros(qp.c.nrows());
    let mut rho = if constrained { 10.0 * lh.max(1.0) / lc.max(1e-12) } else { 0.0 };
    let mut u: DVector<f64> = DVector::zeros(nv);
    project(&mut u);
    let mut iterations = 0;
    let mut last_violation = f64::INFINITY;
    let violation = |u: &DVector<f64>| -> f64 {
        let s = &qp.c * u + &qp.d;
        s.iter().map(|v| (v - hi).max(lo - v).max(0.0)).fold(0.0, f64::max)
    };

    for _outer in 0..40 {
        let lip = lh + rho * lc;
        if lip <= 0.0 {
            break;
        }
        let grad = |u: &DVector<f64>| -> DVector<f64> {
            let mut gr = &qp.h * u + &qp.g;
            if constrained {
                let s = &qp.c * u + &qp.d;
                let w = DVector::from_fn(s.len(), |i, _| {
                    let up: f64 = if hi.is_finite() { (rho * (s[i] - hi) + y_hi[i]).max(0.0) } else { 0.0 };
                    let dn: f64 = if lo.is_finite() { (rho * (lo - s[i]) + y_lo[i]).max(0.0) } else { 0.0 };
                    up - dn
                });
                gr += qp.c.transpose() * w;
            }
            gr
        };
        // FISTA with gradient-based restart
        let mut x = u.clone();
        let mut yk = u.clone();
        let mut tk = 1.0f64;
        let scale = 1.0 + qp.g.norm();
        for _ in 0..100_000 {
            iterations += 1;
            let mut xn = &yk - grad(&yk) / lip;
            project(&mut xn);
            let step = (&xn - &x).norm();
            let tn = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
            if (&yk - &xn).dot(&(&xn - &x)) > 0.0 {
                yk = xn.clone();
                tk = 1.0;
            } else {
                yk = &xn + (&xn - &x) * ((tk - 1.0) / tn);
                tk = tn;
            }
            x = xn;
            if step * lip <= 1e-11 * scale {
                break;
            }
        }
        u = x;
        if !constrained {
            break;
        }
        let s = &qp.c * &u + &qp.d;
        for i in 0..s.len() {
            if hi.is_finite() {
                y_hi[i] = (y_hi[i] + rho * (s[i] - hi)).max(0.0);
            }
            if lo.is_finite() {
                y_lo[i] = (y_lo[i] + rho * (lo - s[i])).max(0.0);
            }
        }
        let v = violation(&u);
        if v <= tol {
            break;
        }
        if v > 0.25 * last_violation {
            rho *= 10.0;
        }
        last_violation = v;
    }

    let controls = DMatrix::from_row_slice(p.horizon, p.system.control_dim(), u.as_slice());
    let states = p.system.predict(&p.psi0, &controls)?;
    let objective: f64 = p.objectives(&states, &controls).iter().sum();
    if !objective.is_finite() {
        return Err(Error::NonFinite("condensed QP objective".into()));
    }
    Ok(CondensedSolution {
        controls,
        objective,
        max_violation: if constrained { violation(&u) } else { 0.0 },
        iterations,
    })
}
