//! Training data generation and lifting into observable coordinates.

use log::warn;
use nalgebra::DMatrix;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::benchmark::{ScaleConfig, Variant, N_AGENTS};
use crate::dictionary::DictionarySet;
use crate::error::{Error, Result};
use crate::integrate::{simulate_benchmark, Record};
use crate::io::Bundle;

/// Raw snapshot data: one slow step per initial condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub variant: Variant,
    pub scale: ScaleConfig,
    pub seed: u64,
    /// `N × state_dim` states at `t = 0`.
    pub initial: DMatrix<f64>,
    /// `N × 2` controls held over the step.
    pub controls: DMatrix<f64>,
    /// `N × state_dim` states at `t = Δt`.
    pub next: DMatrix<f64>,
    /// Hierarchical only: `N·(m+1) × state_dim`; row `s·(m+1) + n` is the
    /// state of sample `s` at `t = n·τ`.
    pub fast: Option<DMatrix<f64>>,
    /// Index of each retained sample in the originally drawn sequence.
    pub ic_index: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.initial.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of fast transition records per sample.
    pub fn fast_records_per_sample(&self) -> usize {
        if self.fast.is_some() {
            self.scale.m
        } else {
            0
        }
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)]);
        let fast = self.fast.as_ref().map(|f| {
            let per = self.scale.m + 1;
            DMatrix::from_fn(rows.len() * per, f.ncols(), |r, c| f[(rows[r / per] * per + r % per, c)])
        });
        Dataset {
            variant: self.variant,
            scale: self.scale,
            seed: self.seed,
            initial: pick(&self.initial),
            controls: pick(&self.controls),
            next: pick(&self.next),
            fast,
            ic_index: rows.iter().map(|&r| self.ic_index[r]).collect(),
        }
    }

    /// Seeded split by initial condition into `(train, held_out)`.
    pub fn split(&self, holdout_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_hold = ((self.len() as f64) * holdout_fraction).round() as usize;
        let (hold, train) = order.split_at(n_hold.min(self.len()));
        let mut hold = hold.to_vec();
        let mut train = train.to_vec();
        hold.sort_unstable();
        train.sort_unstable();
        (self.select(&train), self.select(&hold))
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new(
            "dataset",
            json!({
                "variant": self.variant,
                "state_dim": self.variant.state_dim(),
                "control_dim": N_AGENTS,
                "seed": self.seed,
                "scale": self.scale,
                "samples": self.len(),
                "ic_index": self.ic_index,
            }),
        );
        b.push("initial", self.initial.clone());
        b.push("controls", self.controls.clone());
        b.push("next", self.next.clone());
        if let Some(f) = &self.fast {
            b.push("fast", f.clone());
        }
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let meta = &b.meta;
        let variant: Variant = serde_json::from_value(meta["variant"].clone())?;
        let scale: ScaleConfig = serde_json::from_value(meta["scale"].clone())?;
        let seed = meta["seed"].as_u64().ok_or_else(|| Error::Format("dataset seed missing".into()))?;
        let ic_index: Vec<usize> = serde_json::from_value(meta["ic_index"].clone())?;
        let fast = if b.has("fast") { Some(b.get("fast")?.clone()) } else { None };
        if variant == Variant::Hier && fast.is_none() {
            return Err(Error::MissingData("hierarchical dataset has no fast records".into()));
        }
        Ok(Dataset {
            variant,
            scale,
            seed,
            initial: b.get("initial")?.clone(),
            controls: b.get("controls")?.clone(),
            next: b.get("next")?.clone(),
            fast,
            ic_index,
        })
    }
}

/// Draw `n` points uniformly from `[-half, half]^dim` (row per point).
pub fn sample_box(rng: &mut impl Rng, n: usize, dim: usize, half: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, dim);
    for r in 0..n {
        for c in 0..dim {
            m[(r, c)] = rng.random_range(-half..=half);
        }
    }
    m
}

/// Simulate one slow step from `n_ic` random initial conditions in the unit
/// hypercube with i.i.d. uniform controls in `[-1, 1]`.
pub fn generate_dataset(variant: Variant, n_ic: usize, scale: &ScaleConfig, seed: u64) -> Result<Dataset> {
    if n_ic == 0 {
        return Err(Error::Config("n_ic must be at least 1".into()));
    }
    scale.validate()?;
    let dim = variant.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ics = Vec::with_capacity(n_ic);
    for _ in 0..n_ic {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let u: Vec<f64> = (0..N_AGENTS).map(|_| rng.random_range(-1.0..=1.0)).collect();
        ics.push((x, u));
    }

    let record = match variant {
        Variant::Flat => Record::Slow,
        Variant::Hier => Record::Fast,
    };
    let results: Vec<Result<DMatrix<f64>>> = ics
        .par_iter()
        .map(|(x, u)| {
            let controls = DMatrix::from_row_slice(1, N_AGENTS, u);
            simulate_benchmark(variant, scale, x, &controls, record).map(|t| t.states)
        })
        .collect();

    let mut kept = Vec::with_capacity(n_ic);
    let mut discarded = 0;
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(states) => kept.push((k, states)),
            Err(e @ (Error::Divergence { .. } | Error::NonFinite(_))) => {
                warn!("discarding sample {k}: {e}");
                discarded += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if discarded * 10 > n_ic {
        return Err(Error::TooManyDiverged {
            discarded,
            total: n_ic,
        });
    }

    let n = kept.len();
    let mut initial = DMatrix::zeros(n, dim);
    let mut controls = DMatrix::zeros(n, N_AGENTS);
    let mut next = DMatrix::zeros(n, dim);
    let per = scale.m + 1;
    let mut fast = match variant {
        Variant::Hier => Some(DMatrix::zeros(n * per, dim)),
        Variant::Flat => None,
    };
    let mut ic_index = Vec::with_capacity(n);
    for (row, (k, states)) in kept.iter().enumerate() {
        let (x, u) = &ics[*k];
        let last = states.nrows() - 1;
        for c in 0..dim {
            initial[(row, c)] = x[c];
            next[(row, c)] = states[(last, c)];
        }
        for c in 0..N_AGENTS {
            controls[(row, c)] = u[c];
        }
        if let Some(f) = fast.as_mut() {
            if states.nrows() != per {
                return Err(Error::dims("fast records per sample", per, states.nrows()));
            }
            f.view_mut((row * per, 0), (per, dim)).copy_from(states);
        }
        ic_index.push(*k);
    }
    Ok(Dataset {
        variant,
        scale: *scale,
        seed,
        initial,
        controls,
        next,
        fast,
        ic_index,
    })
}

/// Lifted one-step data of one agent in the flat formulation.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFlatData {
    pub psi_x: DMatrix<f64>,
    pub psi_x_next: DMatrix<f64>,
    pub psi_u: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedFlatData {
    pub agents: Vec<AgentFlatData>,
}

/// Lifted data of one agent in the hierarchical formulation.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentHierData {
    pub psi_x: DMatrix<f64>,
    pub psi_x_next: DMatrix<f64>,
    pub psi_u: DMatrix<f64>,
    /// Window averages `(1/m) Σ_{n<m} ψ(·(t + nτ))`.
    pub avg_psi_y: DMatrix<f64>,
    pub avg_psi_w: DMatrix<f64>,
    /// `N·(m+1)` rows, sample-major, substeps `0..=m`.
    pub fast_psi_y: DMatrix<f64>,
    pub fast_psi_w: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedHierData {
    pub m: usize,
    pub agents: Vec<AgentHierData>,
}

impl LiftedHierData {
    pub fn samples(&self) -> usize {
        self.agents.first().map_or(0, |a| a.psi_x.nrows())
    }
}

fn columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

pub fn lift_flat(ds: &Dataset, dicts: &DictionarySet) -> Result<LiftedFlatData> {
    if ds.variant != Variant::Flat {
        return Err(Error::Config("lift_flat needs a flat dataset".into()));
    }
    dicts.validate()?;
    let agents = (0..dicts.n_agents())
        .map(|i| {
            let idx = ds.variant.slow_indices(i);
            Ok(AgentFlatData {
                psi_x: dicts.x[i].lift_rows(&columns(&ds.initial, &idx))?,
                psi_x_next: dicts.x[i].lift_rows(&columns(&ds.next, &idx))?,
                psi_u: dicts.u[i].lift_rows(&columns(&ds.controls, &[i]))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LiftedFlatData { agents })
}

pub fn lift_hier(ds: &Dataset, dicts: &DictionarySet) -> Result<LiftedHierData> {
    if ds.variant != Variant::Hier {
        return Err(Error::Config("lift_hier needs a hierarchical dataset".into()));
    }
    if !dicts.is_hierarchical() {
        return Err(Error::Config("hierarchical lifting needs y and w dictionaries".into()));
    }
    dicts.validate()?;
    let fast = ds
        .fast
        .as_ref()
        .ok_or_else(|| Error::MissingData("dataset has no fast records".into()))?;
    let m = ds.scale.m;
    let per = m + 1;
    if fast.nrows() != ds.len() * per {
        return Err(Error::dims("fast records", ds.len() * per, fast.nrows()));
    }
    let n = ds.len();
    let agents = (0..dicts.n_agents())
        .map(|i| {
            let xi = ds.variant.slow_indices(i);
            let yi = Variant::fast_y_indices(i);
            let wi = [Variant::actuator_index(i)];
            let fast_psi_y = dicts.y[i].lift_rows(&columns(fast, &yi))?;
            let fast_psi_w = dicts.w[i].lift_rows(&columns(fast, &wi))?;
            let window_avg = |f: &DMatrix<f64>| {
                let mut avg = DMatrix::zeros(n, f.ncols());
                for s in 0..n {
                    for k in 0..m {
                        for c in 0..f.ncols() {
                            avg[(s, c)] += f[(s * per + k, c)];
                        }
                    }
                }
                avg / m as f64
            };
            Ok(AgentHierData {
                psi_x: dicts.x[i].lift_rows(&columns(&ds.initial, &xi))?,
                psi_x_next: dicts.x[i].lift_rows(&columns(&ds.next, &xi))?,
                psi_u: dicts.u[i].lift_rows(&columns(&ds.controls, &[i]))?,
                avg_psi_y: window_avg(&fast_psi_y),
                avg_psi_w: window_avg(&fast_psi_w),
                fast_psi_y,
                fast_psi_w,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LiftedHierData { m, agents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::DictionarySpec;

    #[test]
    fn flat_dataset_counts_and_determinism() {
        let s = ScaleConfig::default();
        let a = generate_dataset(Variant::Flat, 50, &s, 4).unwrap();
        let b = generate_dataset(Variant::Flat, 50, &s, 4).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, b);
        assert!(a.initial.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn hier_single_sample_has_m_fast_records() {
        let s = ScaleConfig::default();
        let d = generate_dataset(Variant::Hier, 1, &s, 1).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.fast_records_per_sample(), 100);
        let f = d.fast.as_ref().unwrap();
        assert_eq!(f.nrows(), 101);
        for c in 0..10 {
            assert_eq!(f[(0, c)], d.initial[(0, c)]);
            assert_eq!(f[(100, c)], d.next[(0, c)]);
        }
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(generate_dataset(Variant::Flat, 0, &ScaleConfig::default(), 0).is_err());
    }

    #[test]
    fn lifted_state_block_roundtrips_raw_states() {
        let s = ScaleConfig::default();
        let d = generate_dataset(Variant::Flat, 20, &s, 9).unwrap();
        let dicts = DictionarySet {
            x: vec![DictionarySpec::gaussian_rbf(2, 12, 1.0, 1), DictionarySpec::gaussian_rbf(2, 12, 1.0, 2)],
            u: vec![DictionarySpec::identity(1); 2],
            y: vec![],
            w: vec![],
        };
        let l = lift_flat(&d, &dicts).unwrap();
        for i in 0..2 {
            let idx = Variant::Flat.slow_indices(i);
            for r in 0..d.len() {
                assert_eq!(l.agents[i].psi_x[(r, 0)], d.initial[(r, idx[0])]);
                assert_eq!(l.agents[i].psi_x_next[(r, 1)], d.next[(r, idx[1])]);
            }
        }
    }

    #[test]
    fn split_partitions_by_ic() {
        let s = ScaleConfig::default();
        let d = generate_dataset(Variant::Flat, 40, &s, 2).unwrap();
        let (tr, te) = d.split(0.1, 5);
        assert_eq!(tr.len() + te.len(), 40);
        assert_eq!(te.len(), 4);
        for k in &te.ic_index {
            assert!(!tr.ic_index.contains(k));
        }
    }

    #[test]
    fn bundle_roundtrip() {
        let s = ScaleConfig::new(0.1, 10).unwrap();
        let d = generate_dataset(Variant::Hier, 3, &s, 2).unwrap();
        let back = Dataset::from_bundle(&Bundle::from_reader(&d.to_bundle().to_bytes().unwrap()[..]).unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
