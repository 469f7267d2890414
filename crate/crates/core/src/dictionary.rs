//! State-inclusive observable dictionaries.
//!
//! A lifted vector is laid out as `[raw; φ(raw)]`: the raw coordinates come
//! first, followed by `n_nonlinear` fixed nonlinear features. Controls use the
//! identity dictionary (`n_nonlinear = 0`).

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width of the box random RBF centers are drawn from.
pub const CENTER_HALF_WIDTH: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    GaussianRbf,
    Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionarySpec {
    pub raw_dim: usize,
    pub n_nonlinear: usize,
    pub feature_kind: FeatureKind,
    /// `n_nonlinear × raw_dim` for RBF dictionaries, empty otherwise.
    pub centers: Vec<Vec<f64>>,
    pub bandwidth: f64,
    pub seed: u64,
}

impl DictionarySpec {
    /// Identity lift (used for controls).
    pub fn identity(raw_dim: usize) -> Self {
        DictionarySpec {
            raw_dim,
            n_nonlinear: 0,
            feature_kind: FeatureKind::GaussianRbf,
            centers: Vec::new(),
            bandwidth: 1.0,
            seed: 0,
        }
    }

    /// Gaussian RBF dictionary with centers drawn by Latin hypercube
    /// sampling of `[-1.2, 1.2]^raw_dim`: each coordinate axis is cut into
    /// `n_nonlinear` strata and every stratum holds exactly one center.
    pub fn gaussian_rbf(raw_dim: usize, n_nonlinear: usize, bandwidth: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers = vec![vec![0.0; raw_dim]; n_nonlinear];
        let width = 2.0 * CENTER_HALF_WIDTH / n_nonlinear.max(1) as f64;
        for d in 0..raw_dim {
            let mut strata: Vec<usize> = (0..n_nonlinear).collect();
            strata.shuffle(&mut rng);
            for (c, k) in centers.iter_mut().zip(strata) {
                c[d] = -CENTER_HALF_WIDTH + (k as f64 + rng.random::<f64>()) * width;
            }
        }
        DictionarySpec {
            raw_dim,
            n_nonlinear,
            feature_kind: FeatureKind::GaussianRbf,
            centers,
            bandwidth,
            seed,
        }
    }

    /// Monomials of total degree ≥ 2 in graded order, truncated to
    /// `n_nonlinear` terms.
    pub fn polynomial(raw_dim: usize, n_nonlinear: usize) -> Self {
        DictionarySpec {
            raw_dim,
            n_nonlinear,
            feature_kind: FeatureKind::Polynomial,
            centers: Vec::new(),
            bandwidth: 1.0,
            seed: 0,
        }
    }

    pub fn lifted_dim(&self) -> usize {
        self.raw_dim + self.n_nonlinear
    }

    /// Positions of the raw coordinates inside a lifted vector.
    pub fn state_block(&self) -> Range<usize> {
        0..self.raw_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.raw_dim == 0 {
            return Err(Error::Config("dictionary raw_dim must be positive".into()));
        }
        if self.n_nonlinear == 0 {
            return Ok(());
        }
        match self.feature_kind {
            FeatureKind::GaussianRbf => {
                if !(self.bandwidth > 0.0) {
                    return Err(Error::Config("RBF bandwidth must be positive".into()));
                }
                if self.centers.len() != self.n_nonlinear {
                    return Err(Error::dims("RBF centers", self.n_nonlinear, self.centers.len()));
                }
                for c in &self.centers {
                    if c.len() != self.raw_dim {
                        return Err(Error::dims("RBF center", self.raw_dim, c.len()));
                    }
                    if c.iter().any(|v| !(v.abs() <= 1.5)) {
                        return Err(Error::Config("RBF centers must lie in [-1.5, 1.5]".into()));
                    }
                }
            }
            FeatureKind::Polynomial => {}
        }
        Ok(())
    }

    /// Writes `[raw; φ(raw)]` into `out`.
    pub fn lift_into(&self, raw: &[f64], out: &mut [f64]) -> Result<()> {
        if raw.len() != self.raw_dim {
            return Err(Error::dims("dictionary input", self.raw_dim, raw.len()));
        }
        if out.len() != self.lifted_dim() {
            return Err(Error::dims("dictionary output", self.lifted_dim(), out.len()));
        }
        out[..self.raw_dim].copy_from_slice(raw);
        let features = &mut out[self.raw_dim..];
        match self.feature_kind {
            FeatureKind::GaussianRbf => {
                let denom = 2.0 * self.bandwidth * self.bandwidth;
                for (f, c) in features.iter_mut().zip(&self.centers) {
                    let d2: f64 = raw.iter().zip(c).map(|(x, c)| (x - c) * (x - c)).sum();
                    *f = (-d2 / denom).exp();
                }
            }
            FeatureKind::Polynomial => {
                for (f, exps) in features.iter_mut().zip(monomial_exponents(self.raw_dim, self.n_nonlinear)) {
                    *f = raw.iter().zip(&exps).map(|(x, &e)| x.powi(e as i32)).product();
                }
            }
        }
        Ok(())
    }

    pub fn lift(&self, raw: &[f64]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.lifted_dim());
        self.lift_into(raw, out.as_mut_slice())?;
        Ok(out)
    }

    /// Lifts each row of `raw` (`N × raw_dim`) into an `N × lifted_dim` matrix.
    pub fn lift_rows(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if raw.ncols() != self.raw_dim {
            return Err(Error::dims("dictionary input columns", self.raw_dim, raw.ncols()));
        }
        let mut out = DMatrix::zeros(raw.nrows(), self.lifted_dim());
        let mut buf_in = vec![0.0; self.raw_dim];
        let mut buf_out = vec![0.0; self.lifted_dim()];
        for i in 0..raw.nrows() {
            for (j, b) in buf_in.iter_mut().enumerate() {
                *b = raw[(i, j)];
            }
            self.lift_into(&buf_in, &mut buf_out)?;
            for (j, v) in buf_out.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        Ok(out)
    }
}

/// Per-agent dictionaries for every observable group. `y` and `w` are empty
/// for flat models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionarySet {
    pub x: Vec<DictionarySpec>,
    pub u: Vec<DictionarySpec>,
    #[serde(default)]
    pub y: Vec<DictionarySpec>,
    #[serde(default)]
    pub w: Vec<DictionarySpec>,
}

impl DictionarySet {
    pub fn n_agents(&self) -> usize {
        self.x.len()
    }

    pub fn is_hierarchical(&self) -> bool {
        !self.y.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.len();
        if self.u.len() != n {
            return Err(Error::dims("control dictionaries", n, self.u.len()));
        }
        if self.is_hierarchical() && (self.y.len() != n || self.w.len() != n) {
            return Err(Error::dims("fast dictionaries", n, self.y.len().min(self.w.len())));
        }
        for d in self.x.iter().chain(&self.u).chain(&self.y).chain(&self.w) {
            d.validate()?;
        }
        Ok(())
    }
}

/// Exponent vectors of total degree ≥ 2, graded then reverse-lexicographic.
fn monomial_exponents(dim: usize, count: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::with_capacity(count);
    let mut degree = 2;
    while out.len() < count {
        let mut level = Vec::new();
        compositions(dim, degree, &mut vec![0; dim], 0, &mut level);
        for e in level {
            if out.len() == count {
                break;
            }
            out.push(e);
        }
        degree += 1;
    }
    out
}

fn compositions(dim: usize, remaining: u32, cur: &mut Vec<u32>, pos: usize, out: &mut Vec<Vec<u32>>) {
    if pos == dim - 1 {
        cur[pos] = remaining;
        out.push(cur.clone());
        return;
    }
    for e in (0..=remaining).rev() {
        cur[pos] = e;
        compositions(dim, remaining - e, cur, pos + 1, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_lift_for_controls() {
        let spec = DictionarySpec::identity(2);
        assert_eq!(spec.lift(&[0.3, -0.7]).unwrap().as_slice(), &[0.3, -0.7]);
    }

    #[test]
    fn twelve_features_give_fourteen_outputs() {
        let spec = DictionarySpec::gaussian_rbf(2, 12, 1.0, 7);
        assert_eq!(spec.lift(&[0.1, 0.2]).unwrap().len(), 14);
        spec.validate().unwrap();
    }

    #[test]
    fn rbf_is_one_at_its_center() {
        let spec = DictionarySpec::gaussian_rbf(2, 3, 0.7, 11);
        let c = spec.centers[1].clone();
        let psi = spec.lift(&c).unwrap();
        assert_eq!(psi[2 + 1], 1.0);
    }

    #[test]
    fn state_block_indices() {
        assert_eq!(DictionarySpec::gaussian_rbf(2, 12, 1.0, 0).state_block(), 0..2);
        assert_eq!(DictionarySpec::gaussian_rbf(1, 4, 1.0, 0).state_block(), 0..1);
        assert_eq!(DictionarySpec::identity(3).state_block(), 0..3);
    }

    #[test]
    fn wrong_length_names_both_sizes() {
        let spec = DictionarySpec::gaussian_rbf(2, 4, 1.0, 0);
        let err = spec.lift(&[1.0, 2.0, 3.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 2") && msg.contains("got 3"), "{msg}");
    }

    #[test]
    fn polynomial_terms_are_graded() {
        let spec = DictionarySpec::polynomial(2, 5);
        let psi = spec.lift(&[2.0, 3.0]).unwrap();
        // x², xy, y², x³, x²y
        assert_eq!(psi.as_slice(), &[2.0, 3.0, 4.0, 6.0, 9.0, 8.0, 12.0]);
    }

    #[test]
    fn same_seed_same_centers() {
        let a = DictionarySpec::gaussian_rbf(2, 12, 1.0, 99);
        let b = DictionarySpec::gaussian_rbf(2, 12, 1.0, 99);
        assert_eq!(a, b);
        assert!(a.centers.iter().flatten().all(|c| c.abs() <= CENTER_HALF_WIDTH));
    }

    proptest! {
        #[test]
        fn lift_keeps_raw_state_and_bounds(x in -1.0f64..1.0, y in -1.0f64..1.0, seed in 0u64..50) {
            let rbf = DictionarySpec::gaussian_rbf(2, 12, 1.0, seed);
            let psi = rbf.lift(&[x, y]).unwrap();
            prop_assert_eq!(psi[0], x);
            prop_assert_eq!(psi[1], y);
            for f in psi.iter().skip(2) {
                prop_assert!(*f > 0.0 && *f <= 1.0);
            }
            let again = rbf.lift(&[x, y]).unwrap();
            prop_assert!(psi.iter().zip(again.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

            let poly = DictionarySpec::polynomial(2, 9);
            let phi = poly.lift(&[x, y]).unwrap();
            for f in phi.iter() {
                prop_assert!(f.abs() <= 1.0);
            }
        }
    }
}
