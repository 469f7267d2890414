//! Least-squares identification of structured Koopman models.
//!
//! Each block equation `ψ' = K (ψ − Σ K_k v_k) + Σ K_k v_k` is bilinear in
//! the unknowns. Writing it as `ψ' = A ψ + Σ C_k v_k` with `A = K` and
//! `C_k = (I − K) K_k` makes it linear; the input gains are recovered by
//! solving `(I − A) K_k = C_k` after `A` has been projected to the stable
//! set.

use std::collections::BTreeMap;

use log::{debug, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{lift_flat, lift_hier, Dataset, LiftedFlatData, LiftedHierData};
use crate::dictionary::DictionarySet;
use crate::error::{Error, Result};
use crate::koopman::{AgentBlocks, FastBlocks, StructuredKoopman};
use crate::linalg::{ridge_regression, solve_identity_minus, spectral_radius};
use crate::reduction::build_reduced;

/// Smallest singular value of `I − A` accepted when factoring gains.
pub const FACTOR_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub rho_target: f64,
    pub ridge: f64,
    /// Required ratio of samples to unknowns per row of a block regression.
    pub min_sample_ratio: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            rho_target: 0.999,
            ridge: 1e-8,
            min_sample_ratio: 10,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_target > 0.0 && self.rho_target < 1.0) {
            return Err(Error::Config(format!("rho_target must lie in (0, 1), got {}", self.rho_target)));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Config("ridge must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub samples: usize,
    pub unknowns_per_row: usize,
    pub residual_rms: f64,
    /// Max-norm of the regression gradient before projection.
    pub gradient_max: f64,
    pub rho_before: f64,
    pub rho_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub blocks: Vec<BlockReport>,
    /// Spectral radius of the combined slow matrix (`K_comb`).
    pub combined_spectral_radius: f64,
    /// Hierarchical fits: spectral radius of the reduced `B_xx,comb`.
    pub reduced_spectral_radius: Option<f64>,
}

/// Scale `a` so its spectral radius does not exceed `rho_target`.
pub fn stability_project(a: &DMatrix<f64>, rho_target: f64) -> DMatrix<f64> {
    let rho = spectral_radius(a);
    if rho <= rho_target {
        a.clone()
    } else {
        a * (rho_target / rho)
    }
}

struct BlockFit {
    a: DMatrix<f64>,
    gains: Vec<DMatrix<f64>>,
    report: BlockReport,
}

fn hstack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = parts[0].nrows();
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for p in parts {
        out.view_mut((0, c), (rows, p.ncols())).copy_from(p);
        c += p.ncols();
    }
    out
}

/// Fit `target ≈ A state + Σ C_k inputs[k]`, project `A`, and factor the
/// gains `K_k = (I − A)⁻¹ C_k`.
fn fit_block(
    name: &str,
    state: &DMatrix<f64>,
    inputs: &[&DMatrix<f64>],
    target: &DMatrix<f64>,
    opts: &FitOptions,
) -> Result<BlockFit> {
    let n = state.ncols();
    let mut parts = vec![state];
    parts.extend_from_slice(inputs);
    for p in &parts {
        if p.nrows() != target.nrows() {
            return Err(Error::dims(format!("{name} regression rows"), target.nrows(), p.nrows()));
        }
    }
    let x = hstack(&parts);
    let unknowns = x.ncols();
    let required = opts.min_sample_ratio * unknowns;
    if x.nrows() < required {
        return Err(Error::InsufficientData {
            block: name.to_string(),
            samples: x.nrows(),
            unknowns,
            required,
        });
    }
    let sol = ridge_regression(&x, target, opts.ridge, name)?;
    let theta_t = sol.theta.transpose();
    let a_raw = theta_t.columns(0, n).into_owned();
    let rho_before = spectral_radius(&a_raw);
    let a = stability_project(&a_raw, opts.rho_target);
    let rho_after = spectral_radius(&a);
    if rho_after < rho_before {
        debug!("{name}: spectral radius {rho_before:.6} projected to {rho_after:.6}");
    }
    let mut gains = Vec::with_capacity(inputs.len());
    let mut c = n;
    for inp in inputs {
        let product = theta_t.columns(c, inp.ncols()).into_owned();
        gains.push(solve_identity_minus(&a, &product, name, FACTOR_TOL)?);
        c += inp.ncols();
    }
    Ok(BlockFit {
        a,
        gains,
        report: BlockReport {
            name: name.to_string(),
            samples: x.nrows(),
            unknowns_per_row: unknowns,
            residual_rms: sol.residual_rms,
            gradient_max: sol.gradient_max,
            rho_before,
            rho_after,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub model: StructuredKoopman,
    pub report: FitReport,
}

/// Fit the flat structured model from lifted snapshot pairs.
pub fn fit_flat_lifted(data: &LiftedFlatData, opts: &FitOptions) -> Result<FittedModel> {
    opts.validate()?;
    let n_agents = data.agents.len();
    let mut agents = Vec::with_capacity(n_agents);
    let mut blocks = Vec::new();
    for i in 0..n_agents {
        let d = &data.agents[i];
        let others: Vec<usize> = (0..n_agents).filter(|&j| j != i).collect();
        let mut inputs: Vec<&DMatrix<f64>> = others.iter().map(|&j| &data.agents[j].psi_x).collect();
        inputs.push(&d.psi_u);
        let fit = fit_block(&format!("x{i}"), &d.psi_x, &inputs, &d.psi_x_next, opts)?;
        let mut gains = fit.gains.into_iter();
        let k_cross: BTreeMap<usize, DMatrix<f64>> = others.iter().map(|&j| (j, gains.next().unwrap())).collect();
        let k_xu = gains.next().unwrap();
        agents.push(AgentBlocks {
            k_xx: fit.a,
            k_cross,
            k_xu,
            fast: None,
        });
        blocks.push(fit.report);
    }
    let model = StructuredKoopman {
        agents,
        rho_target: opts.rho_target,
        dictionaries: None,
    };
    let combined = crate::koopman::assemble_combined(&model)?;
    Ok(FittedModel {
        model,
        report: FitReport {
            blocks,
            combined_spectral_radius: spectral_radius(&combined.a),
            reduced_spectral_radius: None,
        },
    })
}

pub fn fit_flat(ds: &Dataset, dicts: &DictionarySet, opts: &FitOptions) -> Result<FittedModel> {
    let data = lift_flat(ds, dicts)?;
    let mut fitted = fit_flat_lifted(&data, opts)?;
    fitted.model.dictionaries = Some(dicts.clone());
    Ok(fitted)
}

/// Substep transition pairs `(n → n+1, n < m)` of a fast record block,
/// along with the slow-step rows repeated for every substep.
fn substep_pairs(fast: &DMatrix<f64>, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let per = m + 1;
    let n = fast.nrows() / per;
    let c = fast.ncols();
    let cur = DMatrix::from_fn(n * m, c, |r, j| fast[((r / m) * per + r % m, j)]);
    let next = DMatrix::from_fn(n * m, c, |r, j| fast[((r / m) * per + r % m + 1, j)]);
    (cur, next)
}

fn repeat_rows(a: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows() * m, a.ncols(), |r, j| a[(r / m, j)])
}

/// Fit the hierarchical model. Slow blocks use the window-averaged fast
/// observables; fast blocks use substep pairs with slow observables and
/// controls frozen at their slow-step values. `K_xw`, `K_wx` and the slow
/// control gain are fixed at zero.
pub fn fit_hier_lifted(data: &LiftedHierData, opts: &FitOptions) -> Result<FittedModel> {
    opts.validate()?;
    let m = data.m;
    let n_agents = data.agents.len();
    let mut agents = Vec::with_capacity(n_agents);
    let mut blocks = Vec::new();
    for i in 0..n_agents {
        let d = &data.agents[i];
        if d.fast_psi_y.nrows() != d.psi_x.nrows() * (m + 1) || d.fast_psi_w.nrows() != d.fast_psi_y.nrows() {
            return Err(Error::MissingData(format!("agent {i} fast records are incomplete")));
        }
        let others: Vec<usize> = (0..n_agents).filter(|&j| j != i).collect();
        let mut inputs: Vec<&DMatrix<f64>> = others.iter().map(|&j| &data.agents[j].psi_x).collect();
        inputs.push(&d.avg_psi_y);
        let slow = fit_block(&format!("x{i}"), &d.psi_x, &inputs, &d.psi_x_next, opts)?;
        let mut gains = slow.gains.into_iter();
        let k_cross: BTreeMap<usize, DMatrix<f64>> = others.iter().map(|&j| (j, gains.next().unwrap())).collect();
        let k_xy = gains.next().unwrap();

        let (y_cur, y_next) = substep_pairs(&d.fast_psi_y, m);
        let (w_cur, w_next) = substep_pairs(&d.fast_psi_w, m);
        let x_rep = repeat_rows(&d.psi_x, m);
        let u_rep = repeat_rows(&d.psi_u, m);
        let yfit = fit_block(&format!("y{i}"), &y_cur, &[&x_rep, &u_rep], &y_next, opts)?;
        let wfit = fit_block(&format!("w{i}"), &w_cur, &[&y_cur, &u_rep], &w_next, opts)?;

        let (nx, nu, nw) = (d.psi_x.ncols(), d.psi_u.ncols(), d.fast_psi_w.ncols());
        let mut yg = yfit.gains.into_iter();
        let mut wg = wfit.gains.into_iter();
        let fast = FastBlocks {
            k_xy,
            k_xw: DMatrix::zeros(nx, nw),
            k_yy: yfit.a,
            k_yx: yg.next().unwrap(),
            k_yu: yg.next().unwrap(),
            k_ww: wfit.a,
            k_wx: DMatrix::zeros(nw, nx),
            k_wy: wg.next().unwrap(),
            k_wu: wg.next().unwrap(),
        };
        agents.push(AgentBlocks {
            k_xx: slow.a,
            k_cross,
            k_xu: DMatrix::zeros(nx, nu),
            fast: Some(fast),
        });
        blocks.extend([slow.report, yfit.report, wfit.report]);
    }
    let model = StructuredKoopman {
        agents,
        rho_target: opts.rho_target,
        dictionaries: None,
    };
    let combined = crate::koopman::assemble_combined(&model)?;
    let reduced = build_reduced(&model)?;
    let reduced_rho = spectral_radius(&reduced.combined.a);
    if reduced_rho >= 1.0 {
        warn!("reduced slow dynamics are unstable (spectral radius {reduced_rho:.6})");
    }
    Ok(FittedModel {
        model,
        report: FitReport {
            blocks,
            combined_spectral_radius: spectral_radius(&combined.a),
            reduced_spectral_radius: Some(reduced_rho),
        },
    })
}

pub fn fit_hier(ds: &Dataset, dicts: &DictionarySet, opts: &FitOptions) -> Result<FittedModel> {
    let data = lift_hier(ds, dicts)?;
    let mut fitted = fit_hier_lifted(&data, opts)?;
    fitted.model.dictionaries = Some(dicts.clone());
    Ok(fitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::AgentFlatData;
    use crate::koopman::assemble_combined;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
    }

    #[test]
    fn projection_leaves_stable_matrix() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, -0.2, 0.1]));
        assert_eq!(stability_project(&a, 0.999), a);
    }

    #[test]
    fn projection_scales_identity() {
        let a = DMatrix::<f64>::identity(3, 3) * 2.0;
        let p = stability_project(&a, 0.999);
        assert!((p - DMatrix::<f64>::identity(3, 3) * 0.999).amax() < 1e-15);
    }

    #[test]
    fn projection_hits_target_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = rand_mat(&mut rng, 6, 6, 1.0);
        a *= 1.7 / spectral_radius(&a);
        let p = stability_project(&a, 0.999);
        // recompute from the transpose, which takes a different Hessenberg path
        let rho = p.transpose().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!((rho - 0.999).abs() < 1e-9, "{rho}");
    }

    /// Data generated by an exactly linear lifted flat system.
    fn synthetic_flat(rng: &mut ChaCha8Rng, n: usize, coupled: bool) -> (StructuredKoopman, LiftedFlatData) {
        let mut truth = crate::koopman::tests::random_model(rng, &[4, 3], &[1, 1]);
        if !coupled {
            for a in &mut truth.agents {
                for k in a.k_cross.values_mut() {
                    k.fill(0.0);
                }
            }
        }
        let comb = assemble_combined(&truth).unwrap();
        let psi = rand_mat(rng, n, 7, 1.0);
        let u = rand_mat(rng, n, 2, 1.0);
        let next = (&comb.a * psi.transpose() + &comb.b * u.transpose()).transpose();
        let agents = vec![
            AgentFlatData {
                psi_x: psi.columns(0, 4).into_owned(),
                psi_x_next: next.columns(0, 4).into_owned(),
                psi_u: u.columns(0, 1).into_owned(),
            },
            AgentFlatData {
                psi_x: psi.columns(4, 3).into_owned(),
                psi_x_next: next.columns(4, 3).into_owned(),
                psi_u: u.columns(1, 1).into_owned(),
            },
        ];
        (truth, LiftedFlatData { agents })
    }

    #[test]
    fn exact_recovery_on_linear_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (truth, data) = synthetic_flat(&mut rng, 500, true);
        let fitted = fit_flat_lifted(&data, &FitOptions::default()).unwrap();
        for (a, b) in fitted.model.agents.iter().zip(&truth.agents) {
            assert!((&a.k_xx - &b.k_xx).amax() <= 1e-6);
            assert!((&a.k_xu - &b.k_xu).amax() <= 1e-6);
            for (j, k) in &a.k_cross {
                assert!((k - &b.k_cross[j]).amax() <= 1e-6);
            }
        }
        for blk in &fitted.report.blocks {
            assert!(blk.gradient_max <= 1e-8, "{blk:?}");
        }
    }

    #[test]
    fn decoupled_data_gives_zero_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (_, data) = synthetic_flat(&mut rng, 500, false);
        let fitted = fit_flat_lifted(&data, &FitOptions::default()).unwrap();
        for a in &fitted.model.agents {
            for k in a.k_cross.values() {
                assert!(k.amax() <= 1e-6);
            }
        }
    }

    #[test]
    fn reparametrization_roundtrip_preserves_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (truth, data) = synthetic_flat(&mut rng, 300, true);
        let fitted = fit_flat_lifted(&data, &FitOptions::default()).unwrap();
        // products (I − A) K recomputed from the factors equal the combined blocks
        let comb = assemble_combined(&fitted.model).unwrap();
        let a0 = &fitted.model.agents[0];
        let leak = DMatrix::<f64>::identity(4, 4) - &a0.k_xx;
        assert!((comb.block(0, 1) - &leak * &a0.k_cross[&1]).amax() <= 1e-12);
        let psi0 = vec![DVector::from_element(4, 0.3), DVector::from_element(3, -0.2)];
        let u = DMatrix::from_element(1, 2, 0.5);
        let per_agent = fitted.model.predict(&psi0, &u).unwrap();
        let stacked = DVector::from_iterator(7, psi0.iter().flat_map(|p| p.iter().copied()));
        let combined = comb.predict(&stacked, &u).unwrap();
        assert!((per_agent - combined).amax() <= 1e-12);
        let _ = truth;
    }

    #[test]
    fn too_few_samples_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (_, data) = synthetic_flat(&mut rng, 50, true);
        assert!(matches!(
            fit_flat_lifted(&data, &FitOptions::default()),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn zero_regressor_column_is_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let (_, mut data) = synthetic_flat(&mut rng, 500, true);
        data.agents[0].psi_u.fill(0.0);
        match fit_flat_lifted(&data, &FitOptions::default()) {
            Err(Error::RankDeficient { block }) => assert_eq!(block, "x0"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
