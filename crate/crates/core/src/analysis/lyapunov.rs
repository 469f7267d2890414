//! Discrete Lyapunov equation `F X Fᵀ − X = −R`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::spectral_radius;

/// Largest dimension solved through the dense Kronecker system.
pub const DENSE_LIMIT: usize = 32;

/// Residual `‖F X Fᵀ − X + R‖_F` divided by `‖F X Fᵀ‖_F + ‖X‖_F + ‖R‖_F`.
pub fn lyapunov_residual(f: &DMatrix<f64>, x: &DMatrix<f64>, rhs: &DMatrix<f64>) -> f64 {
    let fxf = f * x * f.transpose();
    let res = (&fxf - x + rhs).norm();
    let scale = fxf.norm() + x.norm() + rhs.norm();
    if scale == 0.0 {
        0.0
    } else {
        res / scale
    }
}

fn symmetrize(x: &DMatrix<f64>) -> DMatrix<f64> {
    (x + x.transpose()) * 0.5
}

fn solve_dense(f: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    let nn = n * n;
    // column-major vec: vec(F X Fᵀ) = (F ⊗ F) vec(X)
    let mut lhs = DMatrix::<f64>::identity(nn, nn);
    for a in 0..n {
        for b in 0..n {
            let fab = f[(a, b)];
            if fab == 0.0 {
                continue;
            }
            for c in 0..n {
                for d in 0..n {
                    // row (c·n + a) ↔ X[a, c]; col (d·n + b) ↔ X[b, d]
                    lhs[(c * n + a, d * n + b)] -= fab * f[(c, d)];
                }
            }
        }
    }
    let lu = lhs.clone().lu();
    let b = DMatrix::from_column_slice(nn, 1, rhs.as_slice());
    let mut v = lu.solve(&b).ok_or_else(|| Error::Unstable {
        what: "Lyapunov operator".into(),
        rho: 1.0,
    })?;
    let r = &b - &lhs * &v;
    if let Some(dv) = lu.solve(&r) {
        v += dv;
    }
    Ok(DMatrix::from_column_slice(n, n, v.as_slice()))
}

fn solve_doubling(f: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = rhs.clone();
    let mut fk = f.clone();
    for _ in 0..64 {
        let add = &fk * &x * fk.transpose();
        x += &add;
        fk = &fk * &fk;
        if add.norm() <= 1e-17 * x.norm() || fk.amax() < 1e-300 {
            break;
        }
    }
    x
}

/// Symmetric solution of `F X Fᵀ − X = −R`.
pub fn solve_discrete_lyapunov(f: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    if f.ncols() != n {
        return Err(Error::dims("Lyapunov F columns", n, f.ncols()));
    }
    if rhs.shape() != (n, n) {
        return Err(Error::dims("Lyapunov right-hand side", n, rhs.nrows()));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let rho = spectral_radius(f);
    if rho >= 1.0 {
        return Err(Error::Unstable {
            what: "Lyapunov F".into(),
            rho,
        });
    }
    let x = if n <= DENSE_LIMIT {
        solve_dense(f, rhs)?
    } else {
        solve_doubling(f, rhs)
    };
    Ok(symmetrize(&x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_f_returns_rhs() {
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let x = solve_discrete_lyapunov(&DMatrix::zeros(2, 2), &r).unwrap();
        assert!((x - r).amax() < 1e-15);
    }

    #[test]
    fn scalar_series() {
        let x = solve_discrete_lyapunov(&DMatrix::from_element(1, 1, 0.5), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((x[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn unstable_rejected() {
        let f = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            solve_discrete_lyapunov(&f, &DMatrix::from_element(1, 1, 1.0)),
            Err(Error::Unstable { .. })
        ));
    }

    #[test]
    fn random_residuals_small_both_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in [2, 5, 17, 32, 40] {
            let mut f = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            f *= 0.97 / spectral_radius(&f);
            let g = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
            let r = &g * g.transpose();
            let x = solve_discrete_lyapunov(&f, &r).unwrap();
            assert!(lyapunov_residual(&f, &x, &r) <= 1e-10, "n={n}");
            assert_eq!(x, x.transpose());
        }
    }

    #[test]
    fn dense_and_doubling_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut f = DMatrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        f *= 0.9 / spectral_radius(&f);
        let r = DMatrix::<f64>::identity(8, 8);
        let a = solve_dense(&f, &r).unwrap();
        let b = solve_doubling(&f, &r);
        assert!((&a - &b).amax() <= 1e-9 * a.amax());
    }
}
