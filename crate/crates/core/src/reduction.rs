//! Slow-scale (ε → 0) reduction of hierarchical models.
//!
//! With slow observables and controls frozen, the fast equations settle to
//!
//! ```text
//! ψy* = K_yx ψx + K_yu ψu
//! ψw* = K_wx ψx + K_wy ψy* + K_wu ψu
//! ```
//!
//! and substituting these into the slow equation gives
//! `ψx' = B_xx ψx + Σ_j G_ij ψx_j + B_xu ψu`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::benchmark::ScaleConfig;
use crate::dictionary::DictionarySet;
use crate::error::{Error, Result};
use crate::io::Bundle;
use crate::koopman::{CombinedSystem, FastBlocks, StructuredKoopman};
use crate::linalg::{sigma_min, spectral_norm};

/// Smallest singular value of `I − K_yy` and `I − K_ww` accepted.
pub const FIXED_POINT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedAgent {
    pub b_yx: DMatrix<f64>,
    pub b_yu: DMatrix<f64>,
    pub b_wx: DMatrix<f64>,
    pub b_wu: DMatrix<f64>,
    pub b_xx: DMatrix<f64>,
    pub b_xu: DMatrix<f64>,
    /// `G_ij = (I − K_xx,ii) K_xx,ij`, keyed by `j`.
    pub cross: BTreeMap<usize, DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedModel {
    pub agents: Vec<ReducedAgent>,
    /// `B_xx,comb` and `B_xu,comb`.
    pub combined: CombinedSystem,
    pub source_model_hash: String,
    pub dictionaries: Option<DictionarySet>,
}

fn fast_blocks(model: &StructuredKoopman, i: usize) -> Result<&FastBlocks> {
    model
        .agents
        .get(i)
        .ok_or_else(|| Error::Config(format!("agent index {i} out of range")))?
        .fast
        .as_ref()
        .ok_or_else(|| Error::MissingData(format!("agent {i} has no fast blocks")))
}

fn check_invertible(k: &DMatrix<f64>, what: String) -> Result<()> {
    let n = k.nrows();
    let m = DMatrix::<f64>::identity(n, n) - k;
    let smin = sigma_min(&m);
    if smin <= FIXED_POINT_TOL {
        let smax = spectral_norm(&m);
        return Err(Error::Singular {
            what: format!("(I - {what})"),
            sigma_min: smin,
            condition: if smin > 0.0 { smax / smin } else { f64::INFINITY },
            hint: "",
        });
    }
    Ok(())
}

/// Fixed point of the fast dynamics of agent `i` with `ψx`, `ψu` held.
pub fn fast_fixed_point(
    model: &StructuredKoopman,
    i: usize,
    psi_x: &DVector<f64>,
    psi_u: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let f = fast_blocks(model, i)?;
    check_invertible(&f.k_yy, format!("K_yy[{i}]"))?;
    check_invertible(&f.k_ww, format!("K_ww[{i}]"))?;
    let y = &f.k_yx * psi_x + &f.k_yu * psi_u;
    let w = &f.k_wx * psi_x + &f.k_wy * &y + &f.k_wu * psi_u;
    Ok((y, w))
}

/// Same fixed point obtained from one joint linear solve of the stacked
/// fast system `z' = F z + g`. Does not rely on the y-equation being free
/// of `ψw`.
pub fn fast_fixed_point_joint(
    model: &StructuredKoopman,
    i: usize,
    psi_x: &DVector<f64>,
    psi_u: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let f = fast_blocks(model, i)?;
    let (ny, nw) = (f.ny(), f.nw());
    let iy = DMatrix::<f64>::identity(ny, ny);
    let iw = DMatrix::<f64>::identity(nw, nw);
    let mut big_f = DMatrix::zeros(ny + nw, ny + nw);
    big_f.view_mut((0, 0), (ny, ny)).copy_from(&f.k_yy);
    big_f.view_mut((ny, 0), (nw, ny)).copy_from(&((&iw - &f.k_ww) * &f.k_wy));
    big_f.view_mut((ny, ny), (nw, nw)).copy_from(&f.k_ww);
    let mut g = DVector::zeros(ny + nw);
    g.rows_mut(0, ny)
        .copy_from(&((&iy - &f.k_yy) * (&f.k_yx * psi_x + &f.k_yu * psi_u)));
    g.rows_mut(ny, nw)
        .copy_from(&((&iw - &f.k_ww) * (&f.k_wx * psi_x + &f.k_wu * psi_u)));
    let lhs = DMatrix::<f64>::identity(ny + nw, ny + nw) - big_f;
    let smin = sigma_min(&lhs);
    if smin <= FIXED_POINT_TOL {
        return Err(Error::Singular {
            what: format!("(I - F_fast[{i}])"),
            sigma_min: smin,
            condition: if smin > 0.0 { spectral_norm(&lhs) / smin } else { f64::INFINITY },
            hint: "",
        });
    }
    let z = lhs.lu().solve(&g).ok_or_else(|| Error::Singular {
        what: format!("(I - F_fast[{i}])"),
        sigma_min: smin,
        condition: f64::INFINITY,
        hint: "",
    })?;
    Ok((z.rows(0, ny).into_owned(), z.rows(ny, nw).into_owned()))
}

pub fn build_reduced(model: &StructuredKoopman) -> Result<ReducedModel> {
    model.validate()?;
    let mut agents = Vec::with_capacity(model.n_agents());
    for (i, a) in model.agents.iter().enumerate() {
        let f = fast_blocks(model, i)?;
        check_invertible(&f.k_yy, format!("K_yy[{i}]"))?;
        check_invertible(&f.k_ww, format!("K_ww[{i}]"))?;
        let leak = DMatrix::<f64>::identity(a.nx(), a.nx()) - &a.k_xx;
        let b_yx = f.k_yx.clone();
        let b_yu = f.k_yu.clone();
        let b_wx = &f.k_wx + &f.k_wy * &f.k_yx;
        let b_wu = &f.k_wu + &f.k_wy * &f.k_yu;
        let b_xx = &a.k_xx + &leak * (&f.k_xw * &b_wx + &f.k_xy * &b_yx);
        let b_xu = &leak * (&f.k_xw * &b_wu + &f.k_xy * &b_yu);
        let cross = a.k_cross.iter().map(|(&j, k)| (j, &leak * k)).collect();
        agents.push(ReducedAgent {
            b_yx,
            b_yu,
            b_wx,
            b_wu,
            b_xx,
            b_xu,
            cross,
        });
    }
    let combined = combine(&agents)?;
    Ok(ReducedModel {
        agents,
        combined,
        source_model_hash: model.to_bundle().content_hash(),
        dictionaries: model.dictionaries.clone(),
    })
}

fn combine(agents: &[ReducedAgent]) -> Result<CombinedSystem> {
    let diag: Vec<DMatrix<f64>> = agents.iter().map(|a| a.b_xx.clone()).collect();
    let off: Vec<BTreeMap<usize, DMatrix<f64>>> = agents.iter().map(|a| a.cross.clone()).collect();
    let ctrl: Vec<DMatrix<f64>> = agents.iter().map(|a| a.b_xu.clone()).collect();
    CombinedSystem::from_blocks(&diag, &off, &ctrl)
}

#[derive(Debug, Serialize, Deserialize)]
struct ReducedMeta {
    n_agents: usize,
    source_model_hash: String,
    dictionaries: Option<DictionarySet>,
}

impl ReducedModel {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// One reduced slow step for all agents.
    pub fn step(&self, psi_x: &[DVector<f64>], psi_u: &[DVector<f64>]) -> Vec<DVector<f64>> {
        self.agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut next = &a.b_xx * &psi_x[i] + &a.b_xu * &psi_u[i];
                for (&j, g) in &a.cross {
                    next += g * &psi_x[j];
                }
                next
            })
            .collect()
    }

    pub fn to_bundle(&self) -> Bundle {
        let meta = ReducedMeta {
            n_agents: self.n_agents(),
            source_model_hash: self.source_model_hash.clone(),
            dictionaries: self.dictionaries.clone(),
        };
        let mut b = Bundle::new("reduced-koopman", serde_json::to_value(&meta).unwrap_or(json!(null)));
        for (i, a) in self.agents.iter().enumerate() {
            for (name, m) in [
                ("b_yx", &a.b_yx),
                ("b_yu", &a.b_yu),
                ("b_wx", &a.b_wx),
                ("b_wu", &a.b_wu),
                ("b_xx", &a.b_xx),
                ("b_xu", &a.b_xu),
            ] {
                b.push(format!("agent{i}.{name}"), m.clone());
            }
            for (j, g) in &a.cross {
                b.push(format!("agent{i}.cross.{j}"), g.clone());
            }
        }
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        if b.kind != "reduced-koopman" {
            return Err(Error::Format(format!("expected a reduced-model bundle, found '{}'", b.kind)));
        }
        let meta: ReducedMeta = serde_json::from_value(b.meta.clone())?;
        let mut agents = Vec::with_capacity(meta.n_agents);
        for i in 0..meta.n_agents {
            let get = |name: &str| b.get(&format!("agent{i}.{name}")).cloned();
            let mut cross = BTreeMap::new();
            for j in (0..meta.n_agents).filter(|&j| j != i) {
                let key = format!("agent{i}.cross.{j}");
                if b.has(&key) {
                    cross.insert(j, b.get(&key)?.clone());
                }
            }
            agents.push(ReducedAgent {
                b_yx: get("b_yx")?,
                b_yu: get("b_yu")?,
                b_wx: get("b_wx")?,
                b_wu: get("b_wu")?,
                b_xx: get("b_xx")?,
                b_xu: get("b_xu")?,
                cross,
            });
        }
        let combined = combine(&agents)?;
        Ok(ReducedModel {
            agents,
            combined,
            source_model_hash: meta.source_model_hash,
            dictionaries: meta.dictionaries,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub m: usize,
    /// Largest deviation of the window-averaged fast observables from the
    /// fixed point.
    pub max_average_deviation: f64,
    /// Largest deviation between the full-model slow step and the reduced
    /// slow step.
    pub max_step_deviation: f64,
}

/// Roll the full fast dynamics for `m` substeps from the fixed point
/// (optionally offset by `delta_y`, `delta_w` per agent) and compare the
/// resulting slow step with the reduced model.
pub fn consistency_check(
    model: &StructuredKoopman,
    reduced: &ReducedModel,
    scale: &ScaleConfig,
    psi_x: &[DVector<f64>],
    psi_u: &[DVector<f64>],
    offsets: Option<(&[DVector<f64>], &[DVector<f64>])>,
) -> Result<ConsistencyReport> {
    let m = scale.m;
    let mut avg_y = Vec::with_capacity(model.n_agents());
    let mut avg_w = Vec::with_capacity(model.n_agents());
    let mut max_avg: f64 = 0.0;
    for i in 0..model.n_agents() {
        let (ys, ws) = fast_fixed_point(model, i, &psi_x[i], &psi_u[i])?;
        let (mut y, mut w) = (ys.clone(), ws.clone());
        if let Some((dy, dw)) = offsets {
            y += &dy[i];
            w += &dw[i];
        }
        let mut sy = DVector::zeros(y.len());
        let mut sw = DVector::zeros(w.len());
        for _ in 0..m {
            sy += &y;
            sw += &w;
            let (yn, wn) = model.fast_step(i, &y, &w, &psi_x[i], &psi_u[i])?;
            y = yn;
            w = wn;
        }
        sy /= m as f64;
        sw /= m as f64;
        max_avg = max_avg.max((&sy - &ys).amax()).max((&sw - &ws).amax());
        avg_y.push(sy);
        avg_w.push(sw);
    }
    let full = model.step_slow_averaged(psi_x, &avg_y, &avg_w)?;
    let red = reduced.step(psi_x, psi_u);
    let max_step = full
        .iter()
        .zip(&red)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    Ok(ConsistencyReport {
        m,
        max_average_deviation: max_avg,
        max_step_deviation: max_step,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::koopman::AgentBlocks;
    use crate::linalg::spectral_radius;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn rnd(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
    }

    fn stable(rng: &mut ChaCha8Rng, n: usize, rho: f64) -> DMatrix<f64> {
        let a = rnd(rng, n, n, 1.0);
        let r = spectral_radius(&a);
        a * (rho / r)
    }

    /// Random hierarchical model with stable fast and slow blocks.
    pub(crate) fn random_hier_model(rng: &mut ChaCha8Rng, nx: usize, ny: usize, nw: usize) -> StructuredKoopman {
        let agents = (0..2)
            .map(|i| AgentBlocks {
                k_xx: stable(rng, nx, 0.6),
                k_cross: BTreeMap::from([(1 - i, rnd(rng, nx, nx, 0.3))]),
                k_xu: DMatrix::zeros(nx, 1),
                fast: Some(FastBlocks {
                    k_xy: rnd(rng, nx, ny, 0.3),
                    k_xw: DMatrix::zeros(nx, nw),
                    k_yy: stable(rng, ny, 0.7),
                    k_yx: rnd(rng, ny, nx, 0.5),
                    k_yu: rnd(rng, ny, 1, 0.5),
                    k_ww: stable(rng, nw, 0.7),
                    k_wx: DMatrix::zeros(nw, nx),
                    k_wy: rnd(rng, nw, ny, 0.5),
                    k_wu: rnd(rng, nw, 1, 0.5),
                }),
            })
            .collect();
        StructuredKoopman {
            agents,
            rho_target: 0.999,
            dictionaries: None,
        }
    }

    fn scalar_hier(k_xx: f64, k_xy: f64, k_yy: f64, k_yx: f64) -> StructuredKoopman {
        let agent = |other: usize| AgentBlocks {
            k_xx: scalar(k_xx),
            k_cross: BTreeMap::from([(other, scalar(0.0))]),
            k_xu: scalar(0.0),
            fast: Some(FastBlocks {
                k_xy: scalar(k_xy),
                k_xw: scalar(0.0),
                k_yy: scalar(k_yy),
                k_yx: scalar(k_yx),
                k_yu: scalar(0.0),
                k_ww: scalar(0.5),
                k_wx: scalar(0.0),
                k_wy: scalar(0.0),
                k_wu: scalar(0.0),
            }),
        };
        StructuredKoopman {
            agents: vec![agent(1), agent(0)],
            rho_target: 0.999,
            dictionaries: None,
        }
    }

    #[test]
    fn scalar_fixed_point() {
        let model = scalar_hier(0.5, 0.2, 0.0, 1.0);
        let (y, _) = fast_fixed_point(&model, 0, &DVector::from_element(1, 0.3), &DVector::zeros(1)).unwrap();
        assert!((y[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn scalar_reduced_slow_gain() {
        let reduced = build_reduced(&scalar_hier(0.5, 0.2, 0.3, 1.0)).unwrap();
        assert!((reduced.agents[0].b_xx[(0, 0)] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn uncoupled_scales_keep_slow_block() {
        let reduced = build_reduced(&scalar_hier(0.5, 0.0, 0.3, 1.0)).unwrap();
        assert_eq!(reduced.agents[0].b_xx[(0, 0)], 0.5);
        assert_eq!(reduced.agents[0].b_xu[(0, 0)], 0.0);
    }

    #[test]
    fn fixed_point_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_hier_model(&mut rng, 4, 3, 2);
        let px = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let pu = DVector::from_element(1, 0.4);
        let (y, w) = fast_fixed_point(&model, 1, &px, &pu).unwrap();
        let (y1, w1) = model.fast_step(1, &y, &w, &px, &pu).unwrap();
        assert!((y1 - &y).amax() <= 1e-12);
        assert!((w1 - &w).amax() <= 1e-12);
    }

    #[test]
    fn iteration_converges_to_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_hier_model(&mut rng, 3, 3, 2);
        let px = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let pu = DVector::from_element(1, -0.7);
        let (ys, ws) = fast_fixed_point(&model, 0, &px, &pu).unwrap();
        let (mut y, mut w) = (DVector::from_element(3, 1.0), DVector::from_element(2, -1.0));
        for _ in 0..10_000 {
            let (yn, wn) = model.fast_step(0, &y, &w, &px, &pu).unwrap();
            y = yn;
            w = wn;
        }
        assert!((y - ys).amax() <= 1e-8);
        assert!((w - ws).amax() <= 1e-8);
    }

    #[test]
    fn joint_solve_agrees_with_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_hier_model(&mut rng, 4, 5, 2);
        let px = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let pu = DVector::from_element(1, 0.1);
        let (y1, w1) = fast_fixed_point(&model, 0, &px, &pu).unwrap();
        let (y2, w2) = fast_fixed_point_joint(&model, 0, &px, &pu).unwrap();
        assert!((y1 - y2).amax() <= 1e-12);
        assert!((w1 - w2).amax() <= 1e-12);
    }

    #[test]
    fn singular_fast_block_reported() {
        let model = scalar_hier(0.5, 0.2, 1.0, 1.0);
        let err = fast_fixed_point(&model, 0, &DVector::zeros(1), &DVector::zeros(1)).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }));
        assert!(build_reduced(&model).is_err());
    }

    #[test]
    fn reduced_step_equals_pinned_fast_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = random_hier_model(&mut rng, 4, 3, 2);
        let reduced = build_reduced(&model).unwrap();
        let px: Vec<_> = (0..2).map(|_| DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0))).collect();
        let pu: Vec<_> = (0..2).map(|_| DVector::from_element(1, rng.random_range(-1.0..1.0))).collect();
        let (mut ys, mut ws) = (Vec::new(), Vec::new());
        for i in 0..2 {
            let (y, w) = fast_fixed_point(&model, i, &px[i], &pu[i]).unwrap();
            ys.push(y);
            ws.push(w);
        }
        let pinned = model.step_slow_averaged(&px, &ys, &ws).unwrap();
        let red = reduced.step(&px, &pu);
        for (a, b) in pinned.iter().zip(&red) {
            assert!((a - b).amax() <= 1e-10);
        }
        let stacked = DVector::from_iterator(8, px.iter().flat_map(|p| p.iter().copied()));
        let u = DVector::from_vec(vec![pu[0][0], pu[1][0]]);
        let comb = reduced.combined.step(&stacked, &u);
        let red_stacked = DVector::from_iterator(8, red.iter().flat_map(|p| p.iter().copied()));
        assert!((comb - red_stacked).amax() <= 1e-12);
    }

    #[test]
    fn consistency_from_fixed_point_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = random_hier_model(&mut rng, 3, 3, 2);
        let reduced = build_reduced(&model).unwrap();
        let px: Vec<_> = (0..2).map(|_| DVector::from_element(3, 0.2)).collect();
        let pu: Vec<_> = (0..2).map(|_| DVector::from_element(1, 0.5)).collect();
        let rep = consistency_check(&model, &reduced, &ScaleConfig::default(), &px, &pu, None).unwrap();
        assert!(rep.max_average_deviation <= 1e-10);
        assert!(rep.max_step_deviation <= 1e-10);
    }

    #[test]
    fn perturbed_deviation_shrinks_with_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_hier_model(&mut rng, 3, 3, 2);
        let reduced = build_reduced(&model).unwrap();
        let px: Vec<_> = (0..2).map(|_| DVector::from_element(3, -0.1)).collect();
        let pu: Vec<_> = (0..2).map(|_| DVector::from_element(1, 0.3)).collect();
        let delta = 1e-3;
        let dy: Vec<_> = (0..2).map(|_| DVector::from_element(3, delta)).collect();
        let dw: Vec<_> = (0..2).map(|_| DVector::from_element(2, delta)).collect();
        let mut prev = f64::INFINITY;
        for m in [10, 20, 40, 80, 160] {
            let scale = ScaleConfig::new(0.1, m).unwrap();
            let rep = consistency_check(&model, &reduced, &scale, &px, &pu, Some((&dy, &dw))).unwrap();
            // averaged geometric series: deviation ≤ C δ / m
            assert!(rep.max_average_deviation <= 50.0 * delta / m as f64, "m={m}: {rep:?}");
            assert!(rep.max_step_deviation <= prev + 1e-15);
            prev = rep.max_step_deviation;
        }
    }

    #[test]
    fn bundle_roundtrip_keeps_provenance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = random_hier_model(&mut rng, 3, 2, 1);
        let reduced = build_reduced(&model).unwrap();
        assert_eq!(reduced.source_model_hash, model.to_bundle().content_hash());
        let back = ReducedModel::from_bundle(&Bundle::from_reader(&reduced.to_bundle().to_bytes().unwrap()[..]).unwrap()).unwrap();
        assert_eq!(back, reduced);
    }
}
