//! Multi-step prediction accuracy against the benchmark integrator.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{ScaleConfig, Variant};
use crate::dataset::sample_box;
use crate::dictionary::DictionarySet;
use crate::error::{Error, Result};
use crate::integrate::{simulate_benchmark, Record};
use crate::koopman::CombinedSystem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsReport {
    /// Mean over trajectories of the per-trajectory RMS error on each
    /// agent's raw slow states.
    pub per_agent: Vec<f64>,
    pub trajectories: usize,
    pub steps: usize,
    /// Trajectories dropped because the true system diverged.
    pub skipped: usize,
}

/// Lift the raw slow states of every agent and stack them.
pub fn lift_slow_state(dicts: &DictionarySet, variant: Variant, x: &[f64]) -> Result<DVector<f64>> {
    let mut parts = Vec::new();
    for (i, d) in dicts.x.iter().enumerate() {
        let raw: Vec<f64> = variant.slow_indices(i).iter().map(|&k| x[k]).collect();
        parts.extend(d.lift(&raw)?.iter().copied());
    }
    Ok(DVector::from_vec(parts))
}

/// Roll `system` from the lifted initial slow state of each row of `ics`
/// under i.i.d. uniform controls and compare the raw slow states with the
/// benchmark trajectory.
pub fn rollout_rms(
    system: &CombinedSystem,
    dicts: &DictionarySet,
    variant: Variant,
    scale: &ScaleConfig,
    ics: &DMatrix<f64>,
    steps: usize,
    seed: u64,
) -> Result<RmsReport> {
    if ics.ncols() != variant.state_dim() {
        return Err(Error::dims("evaluation initial states", variant.state_dim(), ics.ncols()));
    }
    if dicts.u.iter().any(|d| d.n_nonlinear != 0) {
        return Err(Error::Config("evaluation assumes unlifted controls".into()));
    }
    let n_agents = dicts.n_agents();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let controls: Vec<DMatrix<f64>> = (0..ics.nrows()).map(|_| sample_box(&mut rng, steps, n_agents, 1.0)).collect();

    let results: Vec<Option<Vec<f64>>> = (0..ics.nrows())
        .into_par_iter()
        .map(|r| -> Result<Option<Vec<f64>>> {
            let x0: Vec<f64> = ics.row(r).iter().copied().collect();
            let truth = match simulate_benchmark(variant, scale, &x0, &controls[r], Record::Slow) {
                Ok(t) => t,
                Err(Error::Divergence { time, .. }) => {
                    warn!("evaluation trajectory {r} diverged at t = {time:.3}; skipped");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let psi0 = lift_slow_state(dicts, variant, &x0)?;
            let pred = system.predict(&psi0, &controls[r])?;
            let per_agent = (0..n_agents)
                .map(|i| {
                    let range = &system.state_ranges[i];
                    let idx = variant.slow_indices(i);
                    let mut sq = 0.0;
                    for t in 1..=steps {
                        for (c, &k) in idx.iter().enumerate() {
                            let e = pred[(t, range.start + c)] - truth.states[(t, k)];
                            sq += e * e;
                        }
                    }
                    (sq / (steps * idx.len()) as f64).sqrt()
                })
                .collect();
            Ok(Some(per_agent))
        })
        .collect::<Result<Vec<_>>>()?;

    let kept: Vec<Vec<f64>> = results.iter().flatten().cloned().collect();
    let skipped = results.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::MissingData("every evaluation trajectory diverged".into()));
    }
    let per_agent = (0..n_agents)
        .map(|i| kept.iter().map(|v| v[i]).sum::<f64>() / kept.len() as f64)
        .collect();
    Ok(RmsReport {
        per_agent,
        trajectories: kept.len(),
        steps,
        skipped,
    })
}
