//! Block-structured multi-agent Koopman models.
//!
//! Agent `i` evolves as
//!
//! ```text
//! ψx_i' = K_ii (ψx_i − Σ_j K_ij ψx_j − K_xu ψu_i) + Σ_j K_ij ψx_j + K_xu ψu_i
//! ```
//!
//! so the other agents and the controls act as inputs whose steady-state
//! gain is `K_ij` (resp. `K_xu`). Hierarchical models add fast `y` and
//! actuator `w` observables evolving on `m` substeps per slow step.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dictionary::DictionarySet;
use crate::error::{Error, Result};
use crate::io::Bundle;

/// Fast-scale blocks of one agent in a hierarchical model.
#[derive(Debug, Clone, PartialEq)]
pub struct FastBlocks {
    pub k_xy: DMatrix<f64>,
    pub k_xw: DMatrix<f64>,
    pub k_yy: DMatrix<f64>,
    pub k_yx: DMatrix<f64>,
    pub k_yu: DMatrix<f64>,
    pub k_ww: DMatrix<f64>,
    pub k_wx: DMatrix<f64>,
    pub k_wy: DMatrix<f64>,
    pub k_wu: DMatrix<f64>,
}

impl FastBlocks {
    pub fn ny(&self) -> usize {
        self.k_yy.nrows()
    }

    pub fn nw(&self) -> usize {
        self.k_ww.nrows()
    }

    fn named(&self) -> [(&'static str, &DMatrix<f64>); 9] {
        [
            ("k_xy", &self.k_xy),
            ("k_xw", &self.k_xw),
            ("k_yy", &self.k_yy),
            ("k_yx", &self.k_yx),
            ("k_yu", &self.k_yu),
            ("k_ww", &self.k_ww),
            ("k_wx", &self.k_wx),
            ("k_wy", &self.k_wy),
            ("k_wu", &self.k_wu),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentBlocks {
    pub k_xx: DMatrix<f64>,
    /// `K_ij` keyed by the other agent `j`.
    pub k_cross: BTreeMap<usize, DMatrix<f64>>,
    /// Zero (`nx × nu`) in hierarchical models, where controls reach the
    /// slow scale only through the fast loops.
    pub k_xu: DMatrix<f64>,
    pub fast: Option<FastBlocks>,
}

impl AgentBlocks {
    pub fn nx(&self) -> usize {
        self.k_xx.nrows()
    }

    pub fn nu(&self) -> usize {
        self.k_xu.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredKoopman {
    pub agents: Vec<AgentBlocks>,
    pub rho_target: f64,
    pub dictionaries: Option<DictionarySet>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    n_agents: usize,
    hierarchical: bool,
    rho_target: f64,
    nx: Vec<usize>,
    nu: Vec<usize>,
    dictionaries: Option<DictionarySet>,
}

fn check_shape(m: &DMatrix<f64>, rows: usize, cols: usize, what: String) -> Result<()> {
    if m.nrows() != rows {
        return Err(Error::dims(format!("{what} rows"), rows, m.nrows()));
    }
    if m.ncols() != cols {
        return Err(Error::dims(format!("{what} cols"), cols, m.ncols()));
    }
    Ok(())
}

impl StructuredKoopman {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn is_hierarchical(&self) -> bool {
        self.agents.iter().any(|a| a.fast.is_some())
    }

    pub fn nx(&self) -> Vec<usize> {
        self.agents.iter().map(AgentBlocks::nx).collect()
    }

    pub fn nu(&self) -> Vec<usize> {
        self.agents.iter().map(AgentBlocks::nu).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let nx = self.nx();
        for (i, a) in self.agents.iter().enumerate() {
            check_shape(&a.k_xx, nx[i], nx[i], format!("K_xx[{i}]"))?;
            for (&j, k) in &a.k_cross {
                if j == i || j >= self.n_agents() {
                    return Err(Error::Config(format!("agent {i} has an invalid coupling index {j}")));
                }
                check_shape(k, nx[i], nx[j], format!("K_xx[{i},{j}]"))?;
            }
            if a.k_xu.nrows() != nx[i] {
                return Err(Error::dims(format!("K_xu[{i}] rows"), nx[i], a.k_xu.nrows()));
            }
            if let Some(f) = &a.fast {
                let (ny, nw, nu) = (f.ny(), f.nw(), a.nu());
                check_shape(&f.k_xy, nx[i], ny, format!("K_xy[{i}]"))?;
                check_shape(&f.k_xw, nx[i], nw, format!("K_xw[{i}]"))?;
                check_shape(&f.k_yy, ny, ny, format!("K_yy[{i}]"))?;
                check_shape(&f.k_yx, ny, nx[i], format!("K_yx[{i}]"))?;
                check_shape(&f.k_yu, ny, nu, format!("K_yu[{i}]"))?;
                check_shape(&f.k_ww, nw, nw, format!("K_ww[{i}]"))?;
                check_shape(&f.k_wx, nw, nx[i], format!("K_wx[{i}]"))?;
                check_shape(&f.k_wy, nw, ny, format!("K_wy[{i}]"))?;
                check_shape(&f.k_wu, nw, nu, format!("K_wu[{i}]"))?;
            }
        }
        Ok(())
    }

    /// Sum of the other agents' inputs `Σ_j K_ij ψx_j`.
    fn cross_input(&self, i: usize, psi_x: &[DVector<f64>]) -> DVector<f64> {
        let a = &self.agents[i];
        let mut s = DVector::zeros(a.nx());
        for (&j, k) in &a.k_cross {
            s += k * &psi_x[j];
        }
        s
    }

    /// One slow step of the flat model, agent by agent.
    pub fn step(&self, psi_x: &[DVector<f64>], psi_u: &[DVector<f64>]) -> Vec<DVector<f64>> {
        (0..self.n_agents())
            .map(|i| {
                let a = &self.agents[i];
                let input = self.cross_input(i, psi_x) + &a.k_xu * &psi_u[i];
                &a.k_xx * (&psi_x[i] - &input) + input
            })
            .collect()
    }

    /// One slow step of the hierarchical model given window-averaged fast
    /// observables.
    pub fn step_slow_averaged(
        &self,
        psi_x: &[DVector<f64>],
        avg_y: &[DVector<f64>],
        avg_w: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        (0..self.n_agents())
            .map(|i| {
                let a = &self.agents[i];
                let f = a
                    .fast
                    .as_ref()
                    .ok_or_else(|| Error::MissingData(format!("agent {i} has no fast blocks")))?;
                let input = self.cross_input(i, psi_x) + &f.k_xw * &avg_w[i] + &f.k_xy * &avg_y[i];
                Ok(&a.k_xx * (&psi_x[i] - &input) + input)
            })
            .collect()
    }

    /// One fast substep `(ψy, ψw) → (ψy', ψw')` of agent `i` with slow
    /// observables and controls frozen.
    pub fn fast_step(
        &self,
        i: usize,
        psi_y: &DVector<f64>,
        psi_w: &DVector<f64>,
        psi_x: &DVector<f64>,
        psi_u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let f = self.agents[i]
            .fast
            .as_ref()
            .ok_or_else(|| Error::MissingData(format!("agent {i} has no fast blocks")))?;
        let y_in = &f.k_yx * psi_x + &f.k_yu * psi_u;
        let y_next = &f.k_yy * (psi_y - &y_in) + y_in;
        let w_in = &f.k_wx * psi_x + &f.k_wy * psi_y + &f.k_wu * psi_u;
        let w_next = &f.k_ww * (psi_w - &w_in) + w_in;
        Ok((y_next, w_next))
    }

    /// Iterate the flat model. `controls` has one row per step holding the
    /// stacked lifted controls. Returns `(steps+1) × Σ nx`.
    pub fn predict(&self, psi0: &[DVector<f64>], controls: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let nx = self.nx();
        let nu = self.nu();
        if psi0.len() != self.n_agents() {
            return Err(Error::dims("initial lifted states", self.n_agents(), psi0.len()));
        }
        let total_u: usize = nu.iter().sum();
        if controls.ncols() != total_u {
            return Err(Error::dims("control columns", total_u, controls.ncols()));
        }
        let total_x: usize = nx.iter().sum();
        let mut out = DMatrix::zeros(controls.nrows() + 1, total_x);
        let mut psi: Vec<DVector<f64>> = psi0.to_vec();
        let write = |out: &mut DMatrix<f64>, row: usize, psi: &[DVector<f64>]| {
            let mut c = 0;
            for p in psi {
                for v in p.iter() {
                    out[(row, c)] = *v;
                    c += 1;
                }
            }
        };
        write(&mut out, 0, &psi);
        for t in 0..controls.nrows() {
            let mut off = 0;
            let us: Vec<DVector<f64>> = nu
                .iter()
                .map(|&k| {
                    let v = DVector::from_fn(k, |r, _| controls[(t, off + r)]);
                    off += k;
                    v
                })
                .collect();
            psi = self.step(&psi, &us);
            write(&mut out, t + 1, &psi);
        }
        Ok(out)
    }

    pub fn to_bundle(&self) -> Bundle {
        let meta = ModelMeta {
            n_agents: self.n_agents(),
            hierarchical: self.is_hierarchical(),
            rho_target: self.rho_target,
            nx: self.nx(),
            nu: self.nu(),
            dictionaries: self.dictionaries.clone(),
        };
        let mut b = Bundle::new("structured-koopman", serde_json::to_value(&meta).unwrap_or(json!(null)));
        for (i, a) in self.agents.iter().enumerate() {
            b.push(format!("agent{i}.k_xx"), a.k_xx.clone());
            for (j, k) in &a.k_cross {
                b.push(format!("agent{i}.k_cross.{j}"), k.clone());
            }
            b.push(format!("agent{i}.k_xu"), a.k_xu.clone());
            if let Some(f) = &a.fast {
                for (name, m) in f.named() {
                    b.push(format!("agent{i}.{name}"), m.clone());
                }
            }
        }
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        if b.kind != "structured-koopman" {
            return Err(Error::Format(format!("expected a model bundle, found '{}'", b.kind)));
        }
        let meta: ModelMeta = serde_json::from_value(b.meta.clone())?;
        let mut agents = Vec::with_capacity(meta.n_agents);
        for i in 0..meta.n_agents {
            let get = |name: &str| b.get(&format!("agent{i}.{name}")).cloned();
            let mut k_cross = BTreeMap::new();
            for j in (0..meta.n_agents).filter(|&j| j != i) {
                let key = format!("agent{i}.k_cross.{j}");
                if b.has(&key) {
                    k_cross.insert(j, b.get(&key)?.clone());
                }
            }
            let fast = if meta.hierarchical {
                Some(FastBlocks {
                    k_xy: get("k_xy")?,
                    k_xw: get("k_xw")?,
                    k_yy: get("k_yy")?,
                    k_yx: get("k_yx")?,
                    k_yu: get("k_yu")?,
                    k_ww: get("k_ww")?,
                    k_wx: get("k_wx")?,
                    k_wy: get("k_wy")?,
                    k_wu: get("k_wu")?,
                })
            } else {
                None
            };
            agents.push(AgentBlocks {
                k_xx: get("k_xx")?,
                k_cross,
                k_xu: get("k_xu")?,
                fast,
            });
        }
        let model = StructuredKoopman {
            agents,
            rho_target: meta.rho_target,
            dictionaries: meta.dictionaries,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Stacked linear system `ψ' = A ψ + B u` over all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub state_ranges: Vec<Range<usize>>,
    pub control_ranges: Vec<Range<usize>>,
}

fn ranges(sizes: &[usize]) -> Vec<Range<usize>> {
    let mut off = 0;
    sizes
        .iter()
        .map(|&s| {
            let r = off..off + s;
            off += s;
            r
        })
        .collect()
}

impl CombinedSystem {
    /// Assemble from per-agent diagonal blocks, off-diagonal input blocks
    /// (already multiplied out) and control blocks.
    pub fn from_blocks(
        diag: &[DMatrix<f64>],
        off_diag: &[BTreeMap<usize, DMatrix<f64>>],
        control: &[DMatrix<f64>],
    ) -> Result<Self> {
        let nx: Vec<usize> = diag.iter().map(|d| d.nrows()).collect();
        let nu: Vec<usize> = control.iter().map(|c| c.ncols()).collect();
        let sr = ranges(&nx);
        let cr = ranges(&nu);
        let n: usize = nx.iter().sum();
        let m: usize = nu.iter().sum();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        for (i, d) in diag.iter().enumerate() {
            check_shape(d, nx[i], nx[i], format!("diagonal block {i}"))?;
            a.view_mut((sr[i].start, sr[i].start), (nx[i], nx[i])).copy_from(d);
            for (&j, g) in &off_diag[i] {
                check_shape(g, nx[i], nx[j], format!("coupling block ({i},{j})"))?;
                a.view_mut((sr[i].start, sr[j].start), (nx[i], nx[j])).copy_from(g);
            }
            check_shape(&control[i], nx[i], nu[i], format!("control block {i}"))?;
            b.view_mut((sr[i].start, cr[i].start), (nx[i], nu[i])).copy_from(&control[i]);
        }
        Ok(CombinedSystem {
            a,
            b,
            state_ranges: sr,
            control_ranges: cr,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.state_ranges.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let (ri, rj) = (&self.state_ranges[i], &self.state_ranges[j]);
        self.a.view((ri.start, rj.start), (ri.len(), rj.len())).into_owned()
    }

    pub fn step(&self, psi: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * psi + &self.b * u
    }

    /// Iterate from `psi0` under `controls` (one row per step). Returns
    /// `(steps+1) × n`.
    pub fn predict(&self, psi0: &DVector<f64>, controls: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if psi0.len() != self.state_dim() {
            return Err(Error::dims("initial lifted state", self.state_dim(), psi0.len()));
        }
        if controls.ncols() != self.control_dim() {
            return Err(Error::dims("control columns", self.control_dim(), controls.ncols()));
        }
        let mut out = DMatrix::zeros(controls.nrows() + 1, self.state_dim());
        out.row_mut(0).copy_from(&psi0.transpose());
        let mut psi = psi0.clone();
        for t in 0..controls.nrows() {
            let u = controls.row(t).transpose();
            psi = self.step(&psi, &u);
            out.row_mut(t + 1).copy_from(&psi.transpose());
        }
        Ok(out)
    }
}

/// Combined slow dynamics `A` with blocks `A_ii = K_ii`,
/// `A_ij = (I − K_ii) K_ij`, and `B_ii = (I − K_ii) K_xu,i`.
pub fn assemble_combined(model: &StructuredKoopman) -> Result<CombinedSystem> {
    model.validate()?;
    let mut diag = Vec::new();
    let mut off = Vec::new();
    let mut ctrl = Vec::new();
    for a in &model.agents {
        let leak = DMatrix::<f64>::identity(a.nx(), a.nx()) - &a.k_xx;
        diag.push(a.k_xx.clone());
        off.push(a.k_cross.iter().map(|(&j, k)| (j, &leak * k)).collect());
        ctrl.push(&leak * &a.k_xu);
    }
    CombinedSystem::from_blocks(&diag, &off, &ctrl)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_model(k11: f64, k12: f64, k22: f64, k21: f64) -> StructuredKoopman {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        StructuredKoopman {
            agents: vec![
                AgentBlocks {
                    k_xx: s(k11),
                    k_cross: BTreeMap::from([(1, s(k12))]),
                    k_xu: s(0.0),
                    fast: None,
                },
                AgentBlocks {
                    k_xx: s(k22),
                    k_cross: BTreeMap::from([(0, s(k21))]),
                    k_xu: s(0.0),
                    fast: None,
                },
            ],
            rho_target: 0.999,
            dictionaries: None,
        }
    }

    pub(crate) fn random_model(rng: &mut ChaCha8Rng, nx: &[usize], nu: &[usize]) -> StructuredKoopman {
        let mut rnd = |r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s));
        let agents = (0..nx.len())
            .map(|i| AgentBlocks {
                k_xx: rnd(nx[i], nx[i], 0.3),
                k_cross: (0..nx.len())
                    .filter(|&j| j != i)
                    .map(|j| (j, rnd(nx[i], nx[j], 0.3)))
                    .collect(),
                k_xu: rnd(nx[i], nu[i], 1.0),
                fast: None,
            })
            .collect();
        StructuredKoopman {
            agents,
            rho_target: 0.999,
            dictionaries: None,
        }
    }

    #[test]
    fn decoupled_is_block_diagonal() {
        let c = assemble_combined(&scalar_model(0.5, 0.0, 0.4, 0.0)).unwrap();
        assert_eq!(c.a[(0, 1)], 0.0);
        assert_eq!(c.a[(1, 0)], 0.0);
    }

    #[test]
    fn scalar_off_diagonals() {
        let c = assemble_combined(&scalar_model(0.5, 0.2, 0.4, 0.1)).unwrap();
        assert!((c.a[(0, 1)] - 0.10).abs() < 1e-15);
        assert!((c.a[(1, 0)] - 0.06).abs() < 1e-15);
        assert_eq!(c.a[(0, 0)], 0.5);
    }

    #[test]
    fn combined_prediction_equals_per_agent_stepping() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_model(&mut rng, &[4, 3, 5], &[1, 2, 1]);
        let comb = assemble_combined(&model).unwrap();
        let psi0: Vec<DVector<f64>> = model.nx().iter().map(|&n| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))).collect();
        let controls = DMatrix::from_fn(30, 4, |_, _| rng.random_range(-1.0..1.0));
        let per_agent = model.predict(&psi0, &controls).unwrap();
        let stacked = DVector::from_iterator(12, psi0.iter().flat_map(|p| p.iter().copied()));
        let combined = comb.predict(&stacked, &controls).unwrap();
        assert!((per_agent - combined).amax() <= 1e-12);
    }

    #[test]
    fn zero_state_zero_controls_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let comb = assemble_combined(&random_model(&mut rng, &[3, 3], &[1, 1])).unwrap();
        let traj = comb.predict(&DVector::zeros(6), &DMatrix::zeros(10, 2)).unwrap();
        assert_eq!(traj.amax(), 0.0);
    }

    #[test]
    fn one_step_is_matrix_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let comb = assemble_combined(&random_model(&mut rng, &[2, 3], &[1, 1])).unwrap();
        let psi = DVector::from_fn(5, |i, _| i as f64 * 0.1);
        let u = DMatrix::from_row_slice(1, 2, &[0.3, -0.2]);
        let traj = comb.predict(&psi, &u).unwrap();
        let direct = &comb.a * &psi + &comb.b * u.row(0).transpose();
        assert_eq!(traj.row(1).transpose(), direct);
    }

    #[test]
    fn dimension_mismatch_reported() {
        let mut model = scalar_model(0.5, 0.2, 0.4, 0.1);
        model.agents[0].k_cross.insert(1, DMatrix::zeros(1, 2));
        assert!(matches!(assemble_combined(&model), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn bundle_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng, &[3, 2], &[1, 1]);
        let bytes = model.to_bundle().to_bytes().unwrap();
        let back = StructuredKoopman::from_bundle(&Bundle::from_reader(&bytes[..]).unwrap()).unwrap();
        assert_eq!(back, model);
    }
}
