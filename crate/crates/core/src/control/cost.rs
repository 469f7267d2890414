//! Per-agent quadratic stage costs in lifted coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::benchmark::Variant;
use crate::dictionary::DictionarySet;
use crate::error::{Error, Result};
use crate::reduction::ReducedModel;

/// `ℓ(ψ, u) = zᵀ Q z + cᵀ z + c0` with `z = [ψ; u]` over the agent's own
/// lifted state and control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub nx: usize,
    pub nu: usize,
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub c0: f64,
}

impl CostModel {
    pub fn zero(nx: usize, nu: usize) -> Self {
        CostModel {
            nx,
            nu,
            q: DMatrix::zeros(nx + nu, nx + nu),
            c: DVector::zeros(nx + nu),
            c0: 0.0,
        }
    }

    pub fn q_xx(&self) -> DMatrix<f64> {
        self.q.view((0, 0), (self.nx, self.nx)).into_owned()
    }

    pub fn q_xu(&self) -> DMatrix<f64> {
        self.q.view((0, self.nx), (self.nx, self.nu)).into_owned()
    }

    pub fn q_uu(&self) -> DMatrix<f64> {
        self.q.view((self.nx, self.nx), (self.nu, self.nu)).into_owned()
    }

    fn stack(&self, psi: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.nx + self.nu);
        z.rows_mut(0, self.nx).copy_from(psi);
        z.rows_mut(self.nx, self.nu).copy_from(u);
        z
    }

    pub fn eval(&self, psi: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let z = self.stack(psi, u);
        z.dot(&(&self.q * &z)) + self.c.dot(&z) + self.c0
    }

    /// Gradient with respect to `[ψ; u]`.
    pub fn grad(&self, psi: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let z = self.stack(psi, u);
        &self.q * &z * 2.0 + &self.c
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.nx + self.nu;
        if self.q.shape() != (d, d) {
            return Err(Error::dims("cost Hessian", d, self.q.nrows()));
        }
        if self.c.len() != d {
            return Err(Error::dims("cost linear term", d, self.c.len()));
        }
        if (&self.q - self.q.transpose()).amax() > 1e-12 * (1.0 + self.q.amax()) {
            return Err(Error::Config("cost Hessian is not symmetric".into()));
        }
        if d > 0 {
            let min = self.q.clone().symmetric_eigen().eigenvalues.min();
            if min < -1e-9 {
                return Err(Error::Config(format!("cost Hessian not PSD (eigenvalue {min:.3e})")));
            }
        }
        Ok(())
    }
}

fn unit_rows(dim: usize, rows: std::ops::Range<usize>) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(rows.len(), dim);
    for (k, r) in rows.enumerate() {
        p[(k, r)] = 1.0;
    }
    p
}

/// Lifted costs for the benchmark.
///
/// Flat: `x₁² + x₂² + u²`. Hierarchical: `x₁² + x₂² + y₁*² + y₂*² + w*²`
/// where the fast fixed points come from the reduced model,
/// `ψy* = B_yx ψx + B_yu ψu` and likewise for `w`.
pub fn build_cost(variant: Variant, dicts: &DictionarySet, reduced: Option<&ReducedModel>) -> Result<Vec<CostModel>> {
    dicts.validate()?;
    let mut out = Vec::new();
    for i in 0..dicts.n_agents() {
        let (dx, du) = (&dicts.x[i], &dicts.u[i]);
        let (nx, nu) = (dx.lifted_dim(), du.lifted_dim());
        let mut cost = CostModel::zero(nx, nu);
        let px = unit_rows(nx + nu, dx.state_block());
        cost.q += px.transpose() * &px;
        match variant {
            Variant::Flat => {
                let pu = unit_rows(nx + nu, nx + du.state_block().start..nx + du.state_block().end);
                cost.q += pu.transpose() * &pu;
            }
            Variant::Hier => {
                let r = reduced.ok_or_else(|| Error::MissingData("hierarchical cost needs a reduced model".into()))?;
                let a = r
                    .agents
                    .get(i)
                    .ok_or_else(|| Error::dims("reduced model agents", dicts.n_agents(), r.agents.len()))?;
                if dicts.y.len() <= i || dicts.w.len() <= i {
                    return Err(Error::MissingData("hierarchical cost needs fast dictionaries".into()));
                }
                for (bx, bu, block) in [
                    (&a.b_yx, &a.b_yu, dicts.y[i].state_block()),
                    (&a.b_wx, &a.b_wu, dicts.w[i].state_block()),
                ] {
                    if bx.ncols() != nx || bu.ncols() != nu {
                        return Err(Error::dims("fast fixed-point map columns", nx + nu, bx.ncols() + bu.ncols()));
                    }
                    let mut e = DMatrix::zeros(block.len(), nx + nu);
                    e.columns_mut(0, nx).copy_from(&bx.rows(block.start, block.len()));
                    e.columns_mut(nx, nu).copy_from(&bu.rows(block.start, block.len()));
                    cost.q += e.transpose() * &e;
                }
            }
        }
        cost.q = (&cost.q + cost.q.transpose()) * 0.5;
        out.push(cost);
    }
    Ok(out)
}
