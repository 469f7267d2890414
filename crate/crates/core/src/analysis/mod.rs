//! Transient growth, gramians and perturbation gains of the fitted linear
//! dynamics.

mod kreiss;
mod lyapunov;
mod metrics;

use std::ops::Range;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use kreiss::{kreiss_bound, max_power_norm, KreissGrid, KreissResult};
pub use lyapunov::{lyapunov_residual, solve_discrete_lyapunov, DENSE_LIMIT};
pub use metrics::{analyze_model, analyze_reduced, MatrixMetrics, MetricsReport};

use crate::error::{Error, Result};
use crate::koopman::{CombinedSystem, StructuredKoopman};
use crate::linalg::{spectral_norm, spectral_radius};
use crate::reduction::ReducedModel;

/// `ln ‖A‖₂`.
pub fn initial_growth(a: &DMatrix<f64>) -> f64 {
    spectral_norm(a).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gramian {
    pub x: DMatrix<f64>,
    pub norm: f64,
}

/// Gramian of `ψ' = F ψ + G v`: solves `F X Fᵀ − X = −G Gᵀ`.
pub fn gramian(f: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<Gramian> {
    if g.nrows() != f.nrows() {
        return Err(Error::dims("gramian input rows", f.nrows(), g.nrows()));
    }
    let x = solve_discrete_lyapunov(f, &(g * g.transpose()))?;
    let norm = spectral_norm(&x);
    Ok(Gramian { x, norm })
}

/// Cross-agent gramian `X^c_ij` of the unreduced model: `F = K_xx,ii`,
/// input `(I − K_xx,ii) K_xx,ij`.
pub fn gramian_cross(model: &StructuredKoopman, i: usize, j: usize) -> Result<Gramian> {
    let a = model
        .agents
        .get(i)
        .ok_or_else(|| Error::Config(format!("agent index {i} out of range")))?;
    let leak = DMatrix::<f64>::identity(a.nx(), a.nx()) - &a.k_xx;
    let g = match a.k_cross.get(&j) {
        Some(k) => &leak * k,
        None => DMatrix::zeros(a.nx(), model.agents.get(j).map_or(0, |b| b.nx())),
    };
    gramian(&a.k_xx, &g)
}

/// Cross-agent gramian with the reduced slow block `F = B_xx,i` and the
/// same input matrix.
pub fn gramian_cross_reduced(reduced: &ReducedModel, i: usize, j: usize) -> Result<Gramian> {
    let a = reduced
        .agents
        .get(i)
        .ok_or_else(|| Error::Config(format!("agent index {i} out of range")))?;
    let g = match a.cross.get(&j) {
        Some(g) => g.clone(),
        None => DMatrix::zeros(a.b_xx.nrows(), reduced.agents.get(j).map_or(0, |b| b.b_xx.nrows())),
    };
    gramian(&a.b_xx, &g)
}

/// Control gramian of the combined system using only the control columns
/// of `agents` (the other columns are zeroed).
pub fn gramian_control(system: &CombinedSystem, agents: &[usize]) -> Result<Gramian> {
    let mut b = DMatrix::zeros(system.state_dim(), system.control_dim());
    for &i in agents {
        let r = system
            .control_ranges
            .get(i)
            .ok_or_else(|| Error::Config(format!("agent index {i} out of range")))?;
        b.columns_mut(r.start, r.len()).copy_from(&system.b.columns(r.start, r.len()));
    }
    gramian(&system.a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationGain {
    pub value: f64,
    pub k_at_max: usize,
    pub k_evaluated: usize,
    /// False when the 5000-step cap was reached before the decay test.
    pub converged: bool,
}

pub const GAIN_K_START: usize = 200;
pub const GAIN_K_CAP: usize = 5000;
pub const GAIN_DECAY: f64 = 1e-6;

/// `max_k σ_max(A^k[:, block])²`, the largest squared norm reachable at a
/// single step `k ≥ 1` from a unit perturbation confined to `block`.
pub fn perturbation_gain(a: &DMatrix<f64>, block: Range<usize>, k_max: usize) -> Result<PerturbationGain> {
    let n = a.nrows();
    if block.end > n {
        return Err(Error::dims("perturbation block end", n, block.end));
    }
    let rho = spectral_radius(a);
    if rho >= 1.0 {
        return Err(Error::Unstable {
            what: "perturbation gain input".into(),
            rho,
        });
    }
    let k_max = k_max.max(1);
    let mut m = a.columns(block.start, block.len()).into_owned();
    let mut best = (0.0f64, 0usize);
    let mut k = 0;
    let mut last;
    loop {
        k += 1;
        if k > 1 {
            m = a * &m;
        }
        last = if m.ncols() == 0 { 0.0 } else { spectral_norm(&m).powi(2) };
        if last > best.0 {
            best = (last, k);
        }
        if k >= k_max && (last <= GAIN_DECAY * best.0 || best.0 == 0.0) {
            break;
        }
        if k >= GAIN_K_CAP {
            warn!("perturbation gain did not decay within {GAIN_K_CAP} steps");
            break;
        }
    }
    Ok(PerturbationGain {
        value: best.0,
        k_at_max: best.1,
        k_evaluated: k,
        converged: last <= GAIN_DECAY * best.0 || best.0 == 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::koopman::AgentBlocks;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    #[test]
    fn growth_of_identity_and_double() {
        assert_eq!(initial_growth(&DMatrix::identity(3, 3)), 0.0);
        assert!((initial_growth(&(DMatrix::identity(3, 3) * 2.0)) - 2f64.ln()).abs() < 1e-12);
    }

    fn two_scalar_agents(k11: f64, k12: f64) -> StructuredKoopman {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        StructuredKoopman {
            agents: vec![
                AgentBlocks {
                    k_xx: s(k11),
                    k_cross: BTreeMap::from([(1, s(k12))]),
                    k_xu: s(1.0),
                    fast: None,
                },
                AgentBlocks {
                    k_xx: s(0.3),
                    k_cross: BTreeMap::from([(0, s(0.1))]),
                    k_xu: s(1.0),
                    fast: None,
                },
            ],
            rho_target: 0.999,
            dictionaries: None,
        }
    }

    #[test]
    fn no_coupling_no_cross_gramian() {
        let g = gramian_cross(&two_scalar_agents(0.5, 0.0), 0, 1).unwrap();
        assert_eq!(g.norm, 0.0);
    }

    #[test]
    fn zero_dynamics_one_step_gramian() {
        let g = gramian_cross(&two_scalar_agents(0.0, 0.7), 0, 1).unwrap();
        assert!((g.x[(0, 0)] - 0.49).abs() < 1e-14);
    }

    #[test]
    fn control_gramian_scalar_and_zero() {
        let sys = CombinedSystem::from_blocks(
            &[DMatrix::from_element(1, 1, 0.5)],
            &[BTreeMap::new()],
            &[DMatrix::from_element(1, 1, 1.0)],
        )
        .unwrap();
        assert!((gramian_control(&sys, &[0]).unwrap().x[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
        assert_eq!(gramian_control(&sys, &[]).unwrap().norm, 0.0);
    }

    #[test]
    fn diagonal_gain_peaks_at_first_step() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.5]));
        let g = perturbation_gain(&a, 0..1, 200).unwrap();
        assert!((g.value - 0.25).abs() < 1e-15);
        assert_eq!(g.k_at_max, 1);
    }

    #[test]
    fn zero_block_columns_give_zero_gain() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.3, 0.0]);
        assert_eq!(perturbation_gain(&a, 1..2, 200).unwrap().value, 0.0);
    }

    #[test]
    fn slow_decay_extends_horizon() {
        let a = DMatrix::from_row_slice(2, 2, &[0.99, 1.0, 0.0, 0.99]);
        let g = perturbation_gain(&a, 1..2, 200).unwrap();
        assert!(g.k_evaluated > 200);
        assert!(g.converged);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gain_bounds_concrete_perturbations(
            entries in proptest::collection::vec(-1.0f64..1.0, 16),
            dir in proptest::collection::vec(-1.0f64..1.0, 2),
            k in 1usize..60,
        ) {
            let mut a = DMatrix::from_row_slice(4, 4, &entries);
            let r = spectral_radius(&a);
            prop_assume!(r > 1e-6);
            a *= 0.9 / r;
            let d = DVector::from_vec(dir);
            prop_assume!(d.norm() > 1e-6);
            let mut psi = DVector::zeros(4);
            psi.rows_mut(2, 2).copy_from(&(d.clone() / d.norm()));
            let gain = perturbation_gain(&a, 2..4, 200).unwrap().value;
            let mut v = psi;
            for _ in 0..k {
                v = &a * v;
            }
            prop_assert!(v.norm_squared() <= gain + 1e-9);
        }

        #[test]
        fn gramians_symmetric_psd(
            entries in proptest::collection::vec(-1.0f64..1.0, 25),
            g in proptest::collection::vec(-1.0f64..1.0, 10),
        ) {
            let mut f = DMatrix::from_row_slice(5, 5, &entries);
            let r = spectral_radius(&f);
            prop_assume!(r > 1e-6);
            f *= 0.95 / r;
            let gm = DMatrix::from_row_slice(5, 2, &g);
            let x = gramian(&f, &gm).unwrap().x;
            prop_assert_eq!(&x, &x.transpose());
            prop_assert!(x.clone().symmetric_eigen().eigenvalues.min() >= -1e-10 * (1.0 + x.amax()));
        }
    }
}
