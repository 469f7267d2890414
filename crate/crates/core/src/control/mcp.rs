//! Affine mixed complementarity problems and a semismooth Newton solver on
//! the Fischer–Burmeister reformulation.
//!
//! Find `z ∈ [l, u]` with `F(z) = M z + q` such that for every component
//! `z = l ⇒ F ≥ 0`, `z = u ⇒ F ≤ 0`, and `l < z < u ⇒ F = 0`.

use std::time::Instant;

use log::debug;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{BandedLu, CsrMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct AffineMcp {
    pub m: CsrMatrix,
    pub q: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl AffineMcp {
    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q.len();
        if self.m.nrows != n || self.m.ncols != n {
            return Err(Error::dims("MCP matrix", n, self.m.nrows.max(self.m.ncols)));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::dims("MCP bounds", n, self.lower.len().min(self.upper.len())));
        }
        for i in 0..n {
            let (l, u) = (self.lower[i], self.upper[i]);
            if l.is_nan() || u.is_nan() || l > u || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(Error::Config(format!("invalid MCP bounds [{l}, {u}] at {i}")));
            }
        }
        if self.q.iter().chain(self.m.values.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("MCP data".into()));
        }
        Ok(())
    }

    pub fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        self.m.mul_vec(z) + &self.q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McpOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Retry singular or non-descent Newton systems as `H + ρ I`.
    pub regularize: bool,
    pub reg_initial: f64,
    pub reg_max: f64,
    pub armijo: f64,
    pub min_step: f64,
}

impl Default for McpOptions {
    fn default() -> Self {
        McpOptions {
            tol: 1e-8,
            max_iter: 500,
            regularize: true,
            reg_initial: 1e-8,
            reg_max: 1e4,
            armijo: 1e-4,
            min_step: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McpSolution {
    pub z: DVector<f64>,
    /// `F(z)` at the solution.
    pub f: DVector<f64>,
    /// Euclidean norm of the Fischer–Burmeister residual.
    pub residual: f64,
    pub iterations: usize,
    pub wall_time: f64,
    pub regularized_steps: usize,
}

/// `φ(a, b) = a + b − √(a² + b²)` and its partial derivatives.
fn fb(a: f64, b: f64) -> (f64, f64, f64) {
    let r = a.hypot(b);
    if r == 0.0 {
        let d = 1.0 - std::f64::consts::FRAC_1_SQRT_2;
        return (0.0, d, d);
    }
    // cancellation-free form in the positive quadrant
    let v = if a > 0.0 && b > 0.0 { 2.0 * a * b / (a + b + r) } else { a + b - r };
    (v, 1.0 - a / r, 1.0 - b / r)
}

/// Componentwise residual `Φ_i(z_i, F_i)` and its derivatives with respect
/// to `z_i` and `F_i`.
fn component(z: f64, f: f64, l: f64, u: f64) -> (f64, f64, f64) {
    let (lf, uf) = (l.is_finite(), u.is_finite());
    match (lf, uf) {
        (false, false) => (f, 0.0, 1.0),
        (true, false) => fb(z - l, f),
        (false, true) => {
            let (v, pa, pb) = fb(u - z, -f);
            (-v, pa, pb)
        }
        (true, true) if l == u => (z - l, 1.0, 0.0),
        (true, true) => {
            let (g, ga, gb) = fb(u - z, -f);
            let (v, oa, ob) = fb(z - l, -g);
            (v, oa + ob * ga, ob * gb)
        }
    }
}

struct Residual {
    phi: DVector<f64>,
    da: DVector<f64>,
    db: DVector<f64>,
}

fn residual(mcp: &AffineMcp, z: &DVector<f64>, f: &DVector<f64>) -> Residual {
    let n = z.len();
    let mut r = Residual {
        phi: DVector::zeros(n),
        da: DVector::zeros(n),
        db: DVector::zeros(n),
    };
    for i in 0..n {
        let (v, a, b) = component(z[i], f[i], mcp.lower[i], mcp.upper[i]);
        r.phi[i] = v;
        r.da[i] = a;
        r.db[i] = b;
    }
    r
}

/// Fischer–Burmeister residual norm of a candidate point.
pub fn fb_residual(mcp: &AffineMcp, z: &DVector<f64>) -> f64 {
    residual(mcp, z, &mcp.eval(z)).phi.norm()
}

fn newton_direction(mcp: &AffineMcp, res: &Residual, band: (usize, usize), reg: f64) -> Option<DVector<f64>> {
    let n = res.phi.len();
    let mut h = BandedLu::zeros(n, band.0, band.1);
    let mut scale: f64 = 0.0;
    for i in 0..n {
        let d = res.da[i] + reg;
        h.add(i, i, d);
        scale = scale.max(d.abs());
        let b = res.db[i];
        if b != 0.0 {
            for (j, v) in mcp.m.row(i) {
                h.add(i, j, b * v);
                scale = scale.max((b * v).abs());
            }
        }
    }
    if !h.factorize(1e-13 * scale.max(1e-300)) {
        return None;
    }
    let mut d = -&res.phi;
    h.solve_in_place(&mut d);
    d.iter().all(|v| v.is_finite()).then_some(d)
}

/// Backtracking line search on `θ = ½‖Φ‖²`. Returns the accepted point.
fn armijo(
    mcp: &AffineMcp,
    z: &DVector<f64>,
    d: &DVector<f64>,
    theta: f64,
    slope: f64,
    opts: &McpOptions,
) -> Option<(DVector<f64>, DVector<f64>, Residual)> {
    let mut t = 1.0;
    while t >= opts.min_step {
        let zt = z + d * t;
        let ft = mcp.eval(&zt);
        let rt = residual(mcp, &zt, &ft);
        if 0.5 * rt.phi.norm_squared() <= theta + opts.armijo * t * slope {
            return Some((zt, ft, rt));
        }
        t *= 0.5;
    }
    None
}

/// Solve an affine MCP from `z0` (default: the projection of 0 onto the
/// box).
pub fn solve_mcp(mcp: &AffineMcp, opts: &McpOptions, z0: Option<&DVector<f64>>) -> Result<McpSolution> {
    mcp.validate()?;
    let start = Instant::now();
    let n = mcp.dim();
    let mut z = match z0 {
        Some(z0) => {
            if z0.len() != n {
                return Err(Error::dims("MCP starting point", n, z0.len()));
            }
            z0.clone()
        }
        None => DVector::zeros(n),
    };
    for i in 0..n {
        z[i] = z[i].clamp(mcp.lower[i], mcp.upper[i]);
    }
    let band = mcp.m.bandwidths();
    let mut f = mcp.eval(&z);
    let mut res = residual(mcp, &z, &f);
    let mut regularized_steps = 0;
    let mut iterations = 0;
    loop {
        let norm = res.phi.norm();
        if norm <= opts.tol {
            // one extra full step usually lands at machine precision
            if let Some(d) = newton_direction(mcp, &res, band, 0.0) {
                let zt = &z + d;
                let ft = mcp.eval(&zt);
                let rt = residual(mcp, &zt, &ft);
                if rt.phi.norm() < norm {
                    (z, f, res) = (zt, ft, rt);
                }
            }
            let residual = res.phi.norm();
            debug!("MCP solved: n = {n}, {iterations} iterations, residual {residual:.3e}");
            return Ok(McpSolution {
                z,
                f,
                residual,
                iterations,
                wall_time: start.elapsed().as_secs_f64(),
                regularized_steps,
            });
        }
        if iterations >= opts.max_iter {
            return Err(Error::NonConvergence {
                iterations,
                residual: norm,
            });
        }
        iterations += 1;
        let theta = 0.5 * norm * norm;
        // ∇θ = Hᵀ Φ with H = diag(da) + diag(db) M
        let grad = res.da.component_mul(&res.phi) + mcp.m.tr_mul_vec(&res.db.component_mul(&res.phi));

        let mut next = None;
        let mut reg = 0.0;
        loop {
            if let Some(d) = newton_direction(mcp, &res, band, reg) {
                let slope = grad.dot(&d);
                if slope < 0.0 {
                    next = armijo(mcp, &z, &d, theta, slope, opts);
                    if next.is_some() {
                        if reg > 0.0 {
                            regularized_steps += 1;
                        }
                        break;
                    }
                }
            }
            if !opts.regularize {
                break;
            }
            reg = if reg == 0.0 { opts.reg_initial } else { reg * 100.0 };
            if reg > opts.reg_max {
                break;
            }
        }
        if next.is_none() && opts.regularize {
            let d = -&grad;
            next = armijo(mcp, &z, &d, theta, -grad.norm_squared(), opts);
        }
        match next {
            Some((zn, fnew, rn)) => {
                z = zn;
                f = fnew;
                res = rn;
            }
            None => return Err(Error::LineSearchStall { residual: norm }),
        }
    }
}
