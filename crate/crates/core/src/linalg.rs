//! Small dense and banded linear-algebra helpers shared by the fitting,
//! analysis and solver modules.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Largest eigenvalue magnitude of a real square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.singular_values().max()
}

pub fn sigma_min(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.singular_values().min()
}

/// Smallest singular value of `z I - a` for complex `z`.
pub fn shifted_sigma_min(a: &DMatrix<f64>, z: Complex64) -> f64 {
    let n = a.nrows();
    let shifted = DMatrix::from_fn(n, n, |i, j| {
        let d = if i == j { z } else { Complex64::new(0.0, 0.0) };
        d - Complex64::new(a[(i, j)], 0.0)
    });
    shifted.singular_values().min()
}

/// Solve `(I - a) x = b`, failing when `I - a` is numerically singular.
pub fn solve_identity_minus(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    what: &str,
    tol: f64,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let m = DMatrix::<f64>::identity(n, n) - a;
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= tol {
        return Err(Error::Singular {
            what: format!("(I - {what})"),
            sigma_min: smin,
            condition: if smin > 0.0 { smax / smin } else { f64::INFINITY },
            hint: "; reduce rho_target",
        });
    }
    m.lu()
        .solve(b)
        .ok_or_else(|| Error::Singular {
            what: format!("(I - {what})"),
            sigma_min: smin,
            condition: smax / smin,
            hint: "; reduce rho_target",
        })
}

/// Result of a ridge-regularized least-squares solve `Y ≈ X Θ`.
#[derive(Debug, Clone)]
pub struct RidgeSolution {
    /// Coefficients, `p × q`.
    pub theta: DMatrix<f64>,
    /// Root-mean-square residual over all entries of `Y`.
    pub residual_rms: f64,
    /// Max-norm of the gradient of `(1/N)||XΘ - Y||² + λ||Θ||²` at `theta`.
    pub gradient_max: f64,
}

/// Ridge regression through the normal equations with scaled Gram matrix
/// `XᵀX / N + λ I`.
pub fn ridge_regression(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    ridge: f64,
    block: &str,
) -> Result<RidgeSolution> {
    let (n, p) = x.shape();
    if y.nrows() != n {
        return Err(Error::dims(format!("regression targets for {block}"), n, y.nrows()));
    }
    if n < p {
        return Err(Error::RankDeficient { block: block.to_string() });
    }
    let scale = 1.0 / n as f64;
    let gram = x.tr_mul(x) * scale;
    let max_diag = (0..p).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    if (0..p).any(|i| gram[(i, i)] <= 1e-14 * max_diag.max(1e-300)) {
        return Err(Error::RankDeficient { block: block.to_string() });
    }
    let rhs = x.tr_mul(y) * scale;
    let reg = &gram + DMatrix::<f64>::identity(p, p) * ridge;
    let chol = Cholesky::new(reg.clone()).ok_or_else(|| Error::RankDeficient {
        block: block.to_string(),
    })?;
    let mut theta = chol.solve(&rhs);
    // one step of iterative refinement
    let r = &rhs - &reg * &theta;
    theta += chol.solve(&r);

    let resid = x * &theta - y;
    let residual_rms = (resid.norm_squared() / (resid.len().max(1)) as f64).sqrt();
    let grad = (&reg * &theta - &rhs) * 2.0;
    let gradient_max = grad.amax();
    Ok(RidgeSolution {
        theta,
        residual_rms,
        gradient_max,
    })
}

/// Row-compressed sparse matrix with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from triplets; duplicate entries are summed, explicit zeros kept.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            debug_assert!(r < nrows && c < ncols);
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.nrows, |i, _| self.row(i).map(|(j, v)| v * x[j]).sum())
    }

    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                out[j] += v * x[i];
            }
        }
        out
    }

    /// Lower and upper bandwidths of the stored pattern.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut kl = 0;
        let mut ku = 0;
        for i in 0..self.nrows {
            for (j, _) in self.row(i) {
                if i > j {
                    kl = kl.max(i - j);
                } else {
                    ku = ku.max(j - i);
                }
            }
        }
        (kl, ku)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }
}

/// LU factorization with partial pivoting of a banded matrix.
///
/// Row `r` stores columns `r - kl ..= r + kl + ku`; the extra `kl` columns
/// hold fill-in created by row interchanges.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandedLu {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        BandedLu {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
            pivots: vec![0; n],
        }
    }

    #[inline]
    fn idx(&self, r: usize, c: usize) -> usize {
        debug_assert!(c + self.kl >= r && c <= r + self.kl + self.ku);
        r * self.width + (c + self.kl - r)
    }

    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let k = self.idx(r, c);
        self.data[k] += v;
    }

    /// Factorize in place. Returns `false` when a pivot underflows
    /// `pivot_tol` (the matrix is numerically singular).
    pub fn factorize(&mut self, pivot_tol: f64) -> bool {
        let n = self.n;
        let reach = self.kl + self.ku;
        for k in 0..n {
            let last_row = (k + self.kl).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.idx(k, k)].abs();
            for r in k + 1..=last_row {
                let v = self.data[self.idx(r, k)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            self.pivots[k] = p;
            if !(best > pivot_tol) {
                return false;
            }
            let last_col = (k + reach).min(n - 1);
            if p != k {
                for c in k..=last_col {
                    let a = self.idx(k, c);
                    let b = self.idx(p, c);
                    self.data.swap(a, b);
                }
            }
            let piv = self.data[self.idx(k, k)];
            for r in k + 1..=last_row {
                let rk = self.idx(r, k);
                if self.data[rk] == 0.0 {
                    continue;
                }
                let l = self.data[rk] / piv;
                self.data[rk] = l;
                for c in k + 1..=last_col {
                    let kc = self.data[self.idx(k, c)];
                    if kc != 0.0 {
                        let rc = self.idx(r, c);
                        self.data[rc] -= l * kc;
                    }
                }
            }
        }
        true
    }

    /// Solve with a factorized matrix, overwriting `b`.
    pub fn solve_in_place(&self, b: &mut DVector<f64>) {
        let n = self.n;
        let reach = self.kl + self.ku;
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                b.swap_rows(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for r in k + 1..=(k + self.kl).min(n - 1) {
                    b[r] -= self.data[self.idx(r, k)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for c in k + 1..=(k + reach).min(n - 1) {
                s -= self.data[self.idx(k, c)] * b[c];
            }
            b[k] = s / self.data[self.idx(k, k)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn banded_lu_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let (kl, ku) = (3, 5);
        let mut dense = DMatrix::<f64>::zeros(n, n);
        let mut band = BandedLu::zeros(n, kl, ku);
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                // small diagonal so pivoting is exercised
                let v: f64 = rng.random_range(-1.0..1.0) * if i == j { 0.01 } else { 1.0 };
                dense[(i, j)] = v;
                band.add(i, j, v);
            }
        }
        let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let expected = dense.clone().lu().solve(&b).unwrap();
        assert!(band.factorize(1e-300));
        let mut x = b.clone();
        band.solve_in_place(&mut x);
        assert!((x - expected).amax() < 1e-9);
    }

    #[test]
    fn ridge_recovers_exact_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(200, 4, |_, _| rng.random_range(-1.0..1.0));
        let theta = DMatrix::from_row_slice(4, 2, &[1.0, -2.0, 0.5, 0.0, 0.25, 3.0, -1.0, 1.0]);
        let y = &x * &theta;
        let sol = ridge_regression(&x, &y, 1e-12, "test").unwrap();
        assert!((sol.theta - theta).amax() < 1e-9);
        assert!(sol.gradient_max < 1e-10);
    }

    #[test]
    fn ridge_flags_zero_column() {
        let mut x = DMatrix::from_fn(50, 3, |i, j| (i * (j + 1)) as f64 * 0.01);
        x.column_mut(1).fill(0.0);
        let y = DMatrix::zeros(50, 1);
        assert!(matches!(
            ridge_regression(&x, &y, 1e-8, "blk"),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn csr_sums_duplicates_and_reports_bandwidth() {
        let m = CsrMatrix::from_triplets(3, 3, vec![(0, 0, 1.0), (2, 0, 2.0), (0, 0, 1.5), (1, 2, 4.0)]);
        assert_eq!(m.get(0, 0), 2.5);
        assert_eq!(m.bandwidths(), (2, 1));
    }
}
