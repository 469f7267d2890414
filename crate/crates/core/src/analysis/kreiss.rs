//! Kreiss-type transient lower bound
//! `sup_{|z|>1} (|z| − 1) ‖(zI − A)⁻¹‖₂`.

use log::warn;
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{shifted_sigma_min, spectral_radius};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KreissGrid {
    pub radii: usize,
    pub angles: usize,
    /// Smallest and largest `|z| − 1` on the log-radial grid.
    pub min_excess: f64,
    pub max_excess: f64,
    pub refine_passes: usize,
    /// Points per axis of each local refinement grid.
    pub refine_points: usize,
}

impl Default for KreissGrid {
    fn default() -> Self {
        KreissGrid {
            radii: 64,
            angles: 256,
            min_excess: 1e-3,
            max_excess: 9.0,
            refine_passes: 2,
            refine_points: 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KreissResult {
    pub value: f64,
    /// Location of the best grid value, `None` when the limit `|z| → ∞`
    /// (value 1) dominates.
    pub argmax: Option<(f64, f64)>,
    /// Set when the maximizer sits on the radial boundary of the grid.
    pub boundary_warning: bool,
}

fn objective(a: &DMatrix<f64>, log_excess: f64, theta: f64) -> f64 {
    let excess = log_excess.exp();
    let z = Complex64::from_polar(1.0 + excess, theta);
    let s = shifted_sigma_min(a, z);
    if s <= 0.0 {
        f64::INFINITY
    } else {
        excess / s
    }
}

pub fn kreiss_bound(a: &DMatrix<f64>, grid: &KreissGrid) -> Result<KreissResult> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::dims("Kreiss matrix columns", n, a.ncols()));
    }
    let rho = spectral_radius(a);
    if rho >= 1.0 {
        return Err(Error::Unstable {
            what: "Kreiss bound input".into(),
            rho,
        });
    }
    if n == 0 || grid.radii < 2 || grid.angles < 1 {
        return Ok(KreissResult {
            value: 1.0,
            argmax: None,
            boundary_warning: false,
        });
    }
    let (l0, l1) = (grid.min_excess.ln(), grid.max_excess.ln());
    let dl = (l1 - l0) / (grid.radii - 1) as f64;
    let dt = std::f64::consts::TAU / grid.angles as f64;

    // real matrices have conjugate-symmetric resolvent norms, so the upper
    // half plane suffices
    let half = grid.angles / 2 + 1;
    let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
    for i in 0..grid.radii {
        for k in 0..half {
            let v = objective(a, l0 + i as f64 * dl, k as f64 * dt);
            if v > best.0 {
                best = (v, i, k);
            }
        }
    }
    let mut value = best.0;
    let mut arg = (l0 + best.1 as f64 * dl, best.2 as f64 * dt);
    let boundary_warning = best.1 == 0 || best.1 == grid.radii - 1;

    let (mut hl, mut ht) = (dl, dt);
    let p = grid.refine_points.max(3);
    for _ in 0..grid.refine_passes {
        let (cl, ct) = arg;
        for i in 0..p {
            for k in 0..p {
                let l = cl - hl + 2.0 * hl * i as f64 / (p - 1) as f64;
                let t = ct - ht + 2.0 * ht * k as f64 / (p - 1) as f64;
                if l < l0 || l > l1 {
                    continue;
                }
                let v = objective(a, l, t);
                if v > value {
                    value = v;
                    arg = (l, t);
                }
            }
        }
        hl *= 2.0 / (p - 1) as f64;
        ht *= 2.0 / (p - 1) as f64;
    }
    if boundary_warning {
        warn!("Kreiss maximizer on the radial grid boundary (|z| - 1 = {:.3e})", arg.0.exp());
    }
    if value < 1.0 {
        return Ok(KreissResult {
            value: 1.0,
            argmax: None,
            boundary_warning: false,
        });
    }
    Ok(KreissResult {
        value,
        argmax: Some((1.0 + arg.0.exp(), arg.1)),
        boundary_warning,
    })
}

/// `max_{k_min ≤ k ≤ k_max} ‖A^k‖₂`.
pub fn max_power_norm(a: &DMatrix<f64>, k_min: usize, k_max: usize) -> f64 {
    let n = a.nrows();
    let mut p = DMatrix::<f64>::identity(n, n);
    let mut best: f64 = if k_min == 0 { 1.0 } else { 0.0 };
    for k in 1..=k_max {
        p = &p * a;
        if k >= k_min {
            best = best.max(crate::linalg::spectral_norm(&p));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;

    #[test]
    fn zero_matrix_gives_one() {
        let r = kreiss_bound(&DMatrix::zeros(3, 3), &KreissGrid::default()).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normal_stable_matrix_gives_one() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, -0.3]));
        let r = kreiss_bound(&a, &KreissGrid::default()).unwrap();
        assert!((r.value - 1.0).abs() < 1e-3);
    }

    #[test]
    fn unstable_rejected() {
        let a = DMatrix::from_element(1, 1, 1.01);
        assert!(matches!(kreiss_bound(&a, &KreissGrid::default()), Err(Error::Unstable { .. })));
    }

    #[test]
    fn jordan_block_matches_fine_grid() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 5.0, 0.0, 0.9]);
        let r = kreiss_bound(&a, &KreissGrid::default()).unwrap();
        assert!(r.value > 1.0);
        // brute-force oracle on a much finer grid, full circle
        let mut fine: f64 = 0.0;
        let nr = 1200;
        let na = 720;
        for i in 0..nr {
            let excess = 1e-3 * (9.0f64 / 1e-3).powf(i as f64 / (nr - 1) as f64);
            for k in 0..na {
                let z = Complex64::from_polar(1.0 + excess, std::f64::consts::TAU * k as f64 / na as f64);
                fine = fine.max(excess / shifted_sigma_min(&a, z));
            }
        }
        assert!((r.value - fine).abs() <= 1e-3 * fine, "{} vs {fine}", r.value);
        assert!(r.value <= max_power_norm(&a, 0, 500) + 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn sandwich_between_one_and_power_bound(
            entries in proptest::collection::vec(-1.0f64..1.0, 9),
            rho in 0.1f64..0.95,
        ) {
            let mut a = DMatrix::from_row_slice(3, 3, &entries);
            let r0 = spectral_radius(&a);
            prop_assume!(r0 > 1e-6);
            a *= rho / r0;
            let grid = KreissGrid { radii: 32, angles: 64, ..KreissGrid::default() };
            let t = kreiss_bound(&a, &grid).unwrap().value;
            prop_assert!(t >= 1.0 - 1e-9);
            // the power bound includes A⁰ = I
            prop_assert!(t <= max_power_norm(&a, 0, 500) + 1e-6);
        }
    }
}
