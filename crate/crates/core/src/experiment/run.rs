//! Pipeline commands. Each writes its artifacts under `out_dir` and returns
//! a JSON summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{ControlInput, ExperimentConfig};
use crate::analysis::{analyze_model, MetricsReport};
use crate::benchmark::Variant;
use crate::control::{
    baseline_rollout, build_cost, build_equilibrium_mcp, build_optimum_kkt, check_coupling_identity, solve_equilibrium,
    solve_optimum, ControlProblem, CostModel, GameSolution, SolutionSummary,
};
use crate::dataset::{generate_dataset, sample_box};
use crate::dictionary::DictionarySet;
use crate::error::{Error, Result};
use crate::evaluate::{lift_slow_state, rollout_rms, RmsReport};
use crate::fit::{fit_flat, fit_hier, FitReport};
use crate::integrate::{simulate_benchmark, Record};
use crate::io::{write_csv, Bundle};
use crate::koopman::{assemble_combined, CombinedSystem, StructuredKoopman};
use crate::reduction::{build_reduced, consistency_check, ConsistencyReport, ReducedModel};

pub const MODEL_FILE: &str = "model.bundle";
pub const REDUCED_FILE: &str = "reduced.bundle";
pub const FIT_REPORT_FILE: &str = "fit_report.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONTROL_FILE: &str = "control.json";
pub const REPORT_FILE: &str = "report.txt";

/// Largest tolerated fraction of failed control ICs.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn state_names(variant: Variant) -> Vec<String> {
    let mut out = Vec::new();
    for i in 1..=2 {
        out.push(format!("x{i}_1"));
        out.push(format!("x{i}_2"));
        if variant == Variant::Hier {
            out.push(format!("y{i}_1"));
            out.push(format!("y{i}_2"));
            out.push(format!("w{i}"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRecord {
    pub ic: usize,
    pub initial: Vec<f64>,
    /// Trajectory file name relative to the simulate directory.
    pub file: Option<String>,
    pub error: Option<String>,
}

/// Integrate the benchmark from the configured or sampled initial states.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    cfg.validate()?;
    let sc = &cfg.simulate;
    let variant = cfg.variant;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds().simulate);
    let initial = match &sc.initial {
        Some(rows) => DMatrix::from_fn(rows.len(), variant.state_dim(), |r, c| rows[r][c]),
        None => sample_box(&mut rng, sc.n_ic, variant.state_dim(), sc.ic_half_width),
    };
    let controls: Vec<DMatrix<f64>> = (0..initial.nrows())
        .map(|_| match sc.controls {
            ControlInput::Zero => DMatrix::zeros(sc.steps, 2),
            ControlInput::Random => sample_box(&mut rng, sc.steps, 2, 1.0),
        })
        .collect();
    let dir = cfg.out_dir.join("simulate");
    fs::create_dir_all(&dir)?;
    let mut columns = vec!["t".to_string()];
    columns.extend(state_names(variant));
    columns.extend(["u1".to_string(), "u2".to_string()]);

    let records: Vec<SimulateRecord> = (0..initial.nrows())
        .into_par_iter()
        .map(|k| {
            let x0: Vec<f64> = initial.row(k).iter().copied().collect();
            let result = simulate_benchmark(variant, &cfg.scale, &x0, &controls[k], Record::Slow).and_then(|traj| {
                let n = variant.state_dim();
                let rows = DMatrix::from_fn(traj.times.len(), 1 + n + 2, |r, c| match c {
                    0 => traj.times[r],
                    c if c <= n => traj.states[(r, c - 1)],
                    c => traj.controls[(r, c - 1 - n)],
                });
                let file = format!("trajectory_{k:04}.csv");
                write_csv(dir.join(&file), &columns, &rows)?;
                Ok(file)
            });
            match result {
                Ok(file) => SimulateRecord {
                    ic: k,
                    initial: x0,
                    file: Some(file),
                    error: None,
                },
                Err(e) => {
                    warn!("initial condition {k}: {e}");
                    SimulateRecord {
                        ic: k,
                        initial: x0,
                        file: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let diverged = records.iter().filter(|r| r.error.is_some()).count();
    let summary = json!({
        "variant": variant,
        "steps": sc.steps,
        "n_ic": records.len(),
        "diverged": diverged,
        "records": records,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub variant: Variant,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub model_hash: String,
    pub reduced_hash: Option<String>,
    /// Held-out rollout RMS of the combined flat model, or of the ε→0
    /// reduced model for hierarchical runs.
    pub rms: RmsReport,
    pub fit: FitReport,
    /// Hierarchical runs: reduced step against the full fast rollout from
    /// the fixed point, at the first held-out state.
    pub consistency: Option<ConsistencyReport>,
    pub seconds: f64,
}

/// Generate data, fit, reduce (hierarchical), evaluate on held-out initial
/// states and write the model bundles and `fit_report.json`.
pub fn cmd_fit(cfg: &ExperimentConfig) -> Result<FitSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let seeds = cfg.seeds();
    let variant = cfg.variant;
    let ds = generate_dataset(variant, cfg.data.n_train_ic, &cfg.scale, seeds.data)?;
    let (train, test) = ds.split(cfg.data.holdout_fraction, seeds.split);
    info!("dataset: {} training, {} held-out samples", train.len(), test.len());
    let dicts = cfg.dictionaries()?;
    let fitted = match variant {
        Variant::Flat => fit_flat(&train, &dicts, &cfg.fit)?,
        Variant::Hier => fit_hier(&train, &dicts, &cfg.fit)?,
    };
    let model = fitted.model;
    let reduced = match variant {
        Variant::Flat => None,
        Variant::Hier => Some(build_reduced(&model)?),
    };
    let system = match &reduced {
        Some(r) => r.combined.clone(),
        None => assemble_combined(&model)?,
    };
    let n_eval = cfg.evaluation.n_test_trajectories.min(test.len());
    if n_eval < cfg.evaluation.n_test_trajectories {
        warn!("only {n_eval} held-out initial states available for evaluation");
    }
    if n_eval == 0 {
        return Err(Error::InsufficientData {
            block: "held-out evaluation".into(),
            samples: 0,
            unknowns: 1,
            required: 1,
        });
    }
    let ics = test.initial.rows(0, n_eval).into_owned();
    let rms = rollout_rms(&system, &dicts, variant, &cfg.scale, &ics, cfg.evaluation.test_horizon, seeds.evaluation)?;
    info!("held-out RMS per agent: {:?}", rms.per_agent);

    let consistency = match &reduced {
        Some(r) => {
            let x0: Vec<f64> = ics.row(0).iter().copied().collect();
            let psi_x = dicts
                .x
                .iter()
                .enumerate()
                .map(|(i, d)| d.lift(&variant.slow_indices(i).map(|k| x0[k])))
                .collect::<Result<Vec<_>>>()?;
            let psi_u: Vec<DVector<f64>> = dicts.u.iter().map(|d| DVector::zeros(d.lifted_dim())).collect();
            Some(consistency_check(&model, r, &cfg.scale, &psi_x, &psi_u, None)?)
        }
        None => None,
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let bundle = model.to_bundle();
    bundle.save(cfg.out_dir.join(MODEL_FILE))?;
    let reduced_hash = match &reduced {
        Some(r) => {
            let b = r.to_bundle();
            b.save(cfg.out_dir.join(REDUCED_FILE))?;
            Some(b.content_hash())
        }
        None => None,
    };
    let summary = FitSummary {
        variant,
        seed: cfg.seed,
        n_train: train.len(),
        n_test: test.len(),
        model_hash: bundle.content_hash(),
        reduced_hash,
        rms,
        fit: fitted.report,
        consistency,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&cfg.out_dir.join(FIT_REPORT_FILE), &summary)?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(summary)
}

/// Load a model bundle and, for hierarchical models, its reduced model.
/// The reduced bundle next to the model is used when its source hash
/// matches; otherwise the reduction is recomputed.
pub fn load_models(model_path: &Path) -> Result<(StructuredKoopman, Option<ReducedModel>)> {
    let bundle = Bundle::load(model_path)?;
    let hash = bundle.content_hash();
    let model = StructuredKoopman::from_bundle(&bundle)?;
    if !model.is_hierarchical() {
        return Ok((model, None));
    }
    let sibling = model_path.with_file_name(REDUCED_FILE);
    if sibling.exists() {
        let reduced = ReducedModel::from_bundle(&Bundle::load(&sibling)?)?;
        if reduced.source_model_hash == hash {
            return Ok((model, Some(reduced)));
        }
        warn!("{} was built from a different model; recomputing", sibling.display());
    }
    let reduced = build_reduced(&model)?;
    Ok((model, Some(reduced)))
}

fn model_path(cfg: &ExperimentConfig, model: Option<&Path>) -> PathBuf {
    model.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join(MODEL_FILE))
}

/// Analysis metrics of a saved model, written as JSON and as a text table.
pub fn cmd_analyze(cfg: &ExperimentConfig, model: Option<&Path>) -> Result<MetricsReport> {
    cfg.validate()?;
    let (model, reduced) = load_models(&model_path(cfg, model))?;
    let report = analyze_model(&model, reduced.as_ref(), &cfg.analysis)?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join(METRICS_FILE), &report)?;
    fs::write(cfg.out_dir.join("metrics.txt"), report.to_table())?;
    Ok(report)
}

/// Results of one control initial condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub ic: usize,
    /// Raw slow states, agent by agent.
    pub x0: Vec<f64>,
    pub baseline: Vec<f64>,
    /// Whether the uncontrolled rollout stays inside the state box.
    pub baseline_feasible: bool,
    pub optimum: Option<SolutionSummary>,
    pub equilibrium: Option<SolutionSummary>,
    /// Per agent RMS over time of the optimum minus equilibrium controls.
    pub control_difference: Option<Vec<f64>>,
    pub error: Option<String>,
}

impl ControlRecord {
    pub fn converged(&self) -> bool {
        self.optimum.is_some() && self.equilibrium.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlAggregate {
    pub n_ic: usize,
    pub converged: usize,
    pub convergence_rate: f64,
    /// Means over converged ICs, per agent (empty when none converged).
    pub mean_objective_baseline: Vec<f64>,
    pub mean_objective_optimum: Vec<f64>,
    pub mean_objective_equilibrium: Vec<f64>,
    pub mean_rms_control_optimum: Vec<f64>,
    pub mean_rms_control_equilibrium: Vec<f64>,
    pub mean_control_difference: Vec<f64>,
    /// Mean relative cost reduction against the baseline, in percent, over
    /// converged ICs whose baseline is feasible.
    pub improvement_optimum_pct: Vec<f64>,
    pub improvement_equilibrium_pct: Vec<f64>,
    /// Mean relative cost increase of the equilibrium over the optimum, in
    /// percent.
    pub equilibrium_over_optimum_pct: Vec<f64>,
    pub max_total_equilibrium_minus_optimum: f64,
    pub max_abs_total_difference: f64,
    pub dominance_violations: usize,
    pub baseline_violations: usize,
    pub max_fb_residual: f64,
    pub max_condensed_gap: f64,
    pub mean_seconds_optimum: f64,
    pub mean_seconds_equilibrium: f64,
    pub coupling_identity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub variant: Variant,
    pub horizon: usize,
    pub decoupled: bool,
    pub model_hash: String,
    pub aggregate: ControlAggregate,
    pub records: Vec<ControlRecord>,
}

/// Control system, costs and the raw-state positions of a loaded model.
pub struct ControlSetup {
    pub system: CombinedSystem,
    pub costs: Vec<CostModel>,
    pub dictionaries: DictionarySet,
}

impl ControlSetup {
    pub fn new(model: &StructuredKoopman, reduced: Option<&ReducedModel>, decoupled: bool) -> Result<Self> {
        let dictionaries = model
            .dictionaries
            .clone()
            .ok_or_else(|| Error::MissingData("model bundle has no dictionaries".into()))?;
        let variant = if model.is_hierarchical() { Variant::Hier } else { Variant::Flat };
        let mut system = match (variant, reduced) {
            (Variant::Hier, Some(r)) => r.combined.clone(),
            (Variant::Hier, None) => return Err(Error::MissingData("hierarchical control needs the reduced model".into())),
            (Variant::Flat, _) => assemble_combined(model)?,
        };
        if decoupled {
            let ranges = system.state_ranges.clone();
            for (i, ri) in ranges.iter().enumerate() {
                for (j, rj) in ranges.iter().enumerate() {
                    if i != j {
                        system.a.view_mut((ri.start, rj.start), (ri.len(), rj.len())).fill(0.0);
                    }
                }
            }
        }
        let costs = build_cost(variant, &dictionaries, reduced)?;
        Ok(ControlSetup {
            system,
            costs,
            dictionaries,
        })
    }

    pub fn variant(&self) -> Variant {
        if self.dictionaries.is_hierarchical() {
            Variant::Hier
        } else {
            Variant::Flat
        }
    }

    /// Control problem from raw slow states given agent by agent.
    pub fn problem(&self, cfg: &ExperimentConfig, slow: &[f64]) -> Result<ControlProblem> {
        let variant = self.variant();
        let mut x = vec![0.0; variant.state_dim()];
        for i in 0..self.dictionaries.n_agents() {
            for (k, &idx) in variant.slow_indices(i).iter().enumerate() {
                x[idx] = slow[2 * i + k];
            }
        }
        let psi0 = lift_slow_state(&self.dictionaries, variant, &x)?;
        let raw: Vec<_> = self.dictionaries.x.iter().map(|d| d.state_block()).collect();
        ControlProblem::new(
            self.system.clone(),
            self.costs.clone(),
            psi0,
            cfg.control.horizon,
            cfg.control.state_box,
            cfg.control.control_box,
            &raw,
        )
    }
}

fn control_difference(p: &ControlProblem, a: &GameSolution, b: &GameSolution) -> Vec<f64> {
    p.system
        .control_ranges
        .iter()
        .map(|r| {
            let d = a.controls.columns(r.start, r.len()) - b.controls.columns(r.start, r.len());
            (d.norm_squared() / d.len().max(1) as f64).sqrt()
        })
        .collect()
}

fn baseline_feasible(p: &ControlProblem) -> bool {
    let zero = DMatrix::zeros(p.horizon, p.system.control_dim());
    match p.system.predict(&p.psi0, &zero) {
        Ok(states) => (1..states.nrows()).all(|t| p.bounded_states.iter().all(|&k| p.state_box.contains(states[(t, k)], 0.0))),
        Err(_) => false,
    }
}

fn solve_ic(cfg: &ExperimentConfig, setup: &ControlSetup, ic: usize, slow: Vec<f64>, traj_dir: Option<&Path>) -> ControlRecord {
    let mut rec = ControlRecord {
        ic,
        x0: slow.clone(),
        baseline: Vec::new(),
        baseline_feasible: false,
        optimum: None,
        equilibrium: None,
        control_difference: None,
        error: None,
    };
    let p = match setup.problem(cfg, &slow) {
        Ok(p) => p,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    rec.baseline = baseline_rollout(&p);
    rec.baseline_feasible = baseline_feasible(&p);
    let solver = &cfg.control.solver;
    let result = solve_optimum(&p, solver).and_then(|opt| {
        rec.optimum = Some(opt.summary());
        let eq = solve_equilibrium(&p, Some(&opt), solver)?;
        rec.equilibrium = Some(eq.summary());
        rec.control_difference = Some(control_difference(&p, &opt, &eq));
        if let Some(dir) = traj_dir {
            opt.write_csv(dir.join(format!("ic{ic:04}_optimum.csv")))?;
            eq.write_csv(dir.join(format!("ic{ic:04}_equilibrium.csv")))?;
        }
        Ok(())
    });
    if let Err(e) = result {
        warn!("control initial condition {ic}: {e}");
        rec.error = Some(format!("{}: {e}", e.kind()));
    }
    rec
}

fn mean_over<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, n: usize) -> Vec<f64> {
    let count = rows.clone().count();
    let mut out = vec![0.0; n];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    if count == 0 {
        return Vec::new();
    }
    out.iter().map(|v| v / count as f64).collect()
}

fn aggregate(records: &[ControlRecord], n_agents: usize, coupling_identity: bool) -> ControlAggregate {
    let ok: Vec<(&ControlRecord, &SolutionSummary, &SolutionSummary)> = records
        .iter()
        .filter_map(|r| Some((r, r.optimum.as_ref()?, r.equilibrium.as_ref()?)))
        .collect();
    let pct = |num: f64, den: f64| if den.abs() > 0.0 { 100.0 * num / den.abs() } else { 0.0 };
    let feasible: Vec<_> = ok.iter().filter(|(r, _, _)| r.baseline_feasible).collect();
    let per_agent = |f: &dyn Fn(usize, &ControlRecord, &SolutionSummary, &SolutionSummary) -> f64, set: &[&(&ControlRecord, &SolutionSummary, &SolutionSummary)]| {
        if set.is_empty() {
            return Vec::new();
        }
        (0..n_agents)
            .map(|i| set.iter().map(|(r, o, e)| f(i, r, o, e)).sum::<f64>() / set.len() as f64)
            .collect::<Vec<f64>>()
    };
    let all: Vec<_> = ok.iter().collect();
    let mut agg = ControlAggregate {
        n_ic: records.len(),
        converged: ok.len(),
        convergence_rate: ok.len() as f64 / records.len().max(1) as f64,
        mean_objective_baseline: mean_over(ok.iter().map(|(r, _, _)| r.baseline.as_slice()), n_agents),
        mean_objective_optimum: mean_over(ok.iter().map(|(_, o, _)| o.objectives.as_slice()), n_agents),
        mean_objective_equilibrium: mean_over(ok.iter().map(|(_, _, e)| e.objectives.as_slice()), n_agents),
        mean_rms_control_optimum: mean_over(ok.iter().map(|(_, o, _)| o.rms_controls.as_slice()), n_agents),
        mean_rms_control_equilibrium: mean_over(ok.iter().map(|(_, _, e)| e.rms_controls.as_slice()), n_agents),
        mean_control_difference: mean_over(
            ok.iter().filter_map(|(r, _, _)| r.control_difference.as_deref()),
            n_agents,
        ),
        improvement_optimum_pct: per_agent(&|i, r, o, _| pct(r.baseline[i] - o.objectives[i], r.baseline[i]), &feasible),
        improvement_equilibrium_pct: per_agent(&|i, r, _, e| pct(r.baseline[i] - e.objectives[i], r.baseline[i]), &feasible),
        equilibrium_over_optimum_pct: per_agent(&|i, _, o, e| pct(e.objectives[i] - o.objectives[i], o.objectives[i]), &all),
        max_total_equilibrium_minus_optimum: f64::NEG_INFINITY,
        max_abs_total_difference: 0.0,
        dominance_violations: 0,
        baseline_violations: 0,
        max_fb_residual: 0.0,
        max_condensed_gap: 0.0,
        mean_seconds_optimum: 0.0,
        mean_seconds_equilibrium: 0.0,
        coupling_identity,
    };
    for (r, o, e) in &ok {
        let base: f64 = r.baseline.iter().sum();
        agg.max_total_equilibrium_minus_optimum = agg.max_total_equilibrium_minus_optimum.max(e.total - o.total);
        agg.max_abs_total_difference = agg.max_abs_total_difference.max((e.total - o.total).abs());
        if o.total > e.total + 1e-6 * (1.0 + o.total.abs()) {
            agg.dominance_violations += 1;
        }
        if o.total > base + 1e-6 * (1.0 + base.abs()) {
            agg.baseline_violations += 1;
        }
        agg.max_fb_residual = agg.max_fb_residual.max(o.residuals.fb).max(e.residuals.fb);
        agg.max_condensed_gap = agg.max_condensed_gap.max(o.condensed_gap.unwrap_or(0.0));
        agg.mean_seconds_optimum += o.stats.wall_time / ok.len() as f64;
        agg.mean_seconds_equilibrium += e.stats.wall_time / ok.len() as f64;
    }
    if ok.is_empty() {
        agg.max_total_equilibrium_minus_optimum = 0.0;
    }
    agg
}

fn control_table(records: &[ControlRecord], n_agents: usize) -> (Vec<String>, DMatrix<f64>) {
    let mut cols = vec!["ic".to_string()];
    let per = |name: &'static str| (1..=n_agents).map(move |i| format!("{name}_{i}"));
    cols.extend((0..2 * n_agents).map(|k| format!("x0_{k}")));
    for name in [
        "baseline",
        "optimum",
        "equilibrium",
        "rms_u_optimum",
        "rms_u_equilibrium",
        "control_difference",
    ] {
        cols.extend(per(name));
    }
    cols.extend(
        [
            "optimum_iterations",
            "equilibrium_iterations",
            "optimum_seconds",
            "equilibrium_seconds",
            "optimum_fb",
            "equilibrium_fb",
            "condensed_gap",
            "baseline_feasible",
            "converged",
        ]
        .map(String::from),
    );
    let nan = |n: usize| vec![f64::NAN; n];
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            let mut row = vec![r.ic as f64];
            row.extend(&r.x0);
            row.extend(if r.baseline.is_empty() { nan(n_agents) } else { r.baseline.clone() });
            for s in [&r.optimum, &r.equilibrium] {
                row.extend(s.as_ref().map_or(nan(n_agents), |s| s.objectives.clone()));
            }
            for s in [&r.optimum, &r.equilibrium] {
                row.extend(s.as_ref().map_or(nan(n_agents), |s| s.rms_controls.clone()));
            }
            row.extend(r.control_difference.clone().unwrap_or_else(|| nan(n_agents)));
            let stat = |s: &Option<SolutionSummary>, f: fn(&SolutionSummary) -> f64| s.as_ref().map_or(f64::NAN, f);
            row.push(stat(&r.optimum, |s| s.stats.iterations as f64));
            row.push(stat(&r.equilibrium, |s| s.stats.iterations as f64));
            row.push(stat(&r.optimum, |s| s.stats.wall_time));
            row.push(stat(&r.equilibrium, |s| s.stats.wall_time));
            row.push(stat(&r.optimum, |s| s.residuals.fb));
            row.push(stat(&r.equilibrium, |s| s.residuals.fb));
            row.push(stat(&r.optimum, |s| s.condensed_gap.unwrap_or(f64::NAN)));
            row.push(r.baseline_feasible as u8 as f64);
            row.push(r.converged() as u8 as f64);
            row
        })
        .collect();
    let m = DMatrix::from_fn(rows.len(), cols.len(), |r, c| rows[r][c]);
    (cols, m)
}

/// Baseline, optimum and equilibrium (warm-started from the optimum) on
/// `n_control_ic` sampled initial states. Fails when more than 20% of the
/// initial states fail.
pub fn cmd_control(cfg: &ExperimentConfig, model: Option<&Path>) -> Result<ControlSummary> {
    cfg.validate()?;
    let path = model_path(cfg, model);
    let model_hash = Bundle::load(&path)?.content_hash();
    let (model, reduced) = load_models(&path)?;
    let setup = ControlSetup::new(&model, reduced.as_ref(), cfg.control.decoupled)?;
    let n_agents = setup.dictionaries.n_agents();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds().control);
    let ics = sample_box(&mut rng, cfg.control.n_control_ic, 2 * n_agents, cfg.control.ic_half_width);

    let coupling_identity = {
        let p = setup.problem(cfg, &ics.row(0).iter().copied().collect::<Vec<_>>())?;
        let opt = build_optimum_kkt(&p)?;
        let eq = build_equilibrium_mcp(&p)?;
        match check_coupling_identity(&p, &opt, &eq) {
            Ok(()) => true,
            Err(e) => {
                warn!("coupling identity check failed: {e}");
                false
            }
        }
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let traj_dir = cfg.out_dir.join("control");
    if cfg.control.write_trajectories {
        fs::create_dir_all(&traj_dir)?;
    }
    let traj = cfg.control.write_trajectories.then_some(traj_dir.as_path());
    let records: Vec<ControlRecord> = (0..ics.nrows())
        .into_par_iter()
        .map(|k| solve_ic(cfg, &setup, k, ics.row(k).iter().copied().collect(), traj))
        .collect();

    let aggregate = aggregate(&records, n_agents, coupling_identity);
    let summary = ControlSummary {
        variant: setup.variant(),
        horizon: cfg.control.horizon,
        decoupled: cfg.control.decoupled,
        model_hash,
        aggregate,
        records,
    };
    write_json(&cfg.out_dir.join(CONTROL_FILE), &summary)?;
    let (cols, table) = control_table(&summary.records, n_agents);
    write_csv(cfg.out_dir.join("control.csv"), &cols, &table)?;

    let failed = summary.records.len() - summary.aggregate.converged;
    if failed as f64 > MAX_FAILURE_FRACTION * summary.records.len() as f64 {
        return Err(Error::TooManyFailures {
            failed,
            total: summary.records.len(),
        });
    }
    Ok(summary)
}

/// Read whichever of the fit, metrics and control outputs exist and write
/// a plain-text summary next to them.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let read = |name: &str| -> Result<Option<String>> {
        let p = cfg.out_dir.join(name);
        if p.exists() {
            Ok(Some(fs::read_to_string(p)?))
        } else {
            Ok(None)
        }
    };
    let fit: Option<FitSummary> = read(FIT_REPORT_FILE)?.map(|t| serde_json::from_str(&t)).transpose()?;
    let metrics: Option<MetricsReport> = read(METRICS_FILE)?.map(|t| serde_json::from_str(&t)).transpose()?;
    let control: Option<ControlSummary> = read(CONTROL_FILE)?.map(|t| serde_json::from_str(&t)).transpose()?;
    if fit.is_none() && metrics.is_none() && control.is_none() {
        return Err(Error::MissingData(format!(
            "no fit, metrics or control results in {}",
            cfg.out_dir.display()
        )));
    }
    let text = super::report::render(fit.as_ref(), metrics.as_ref(), control.as_ref());
    fs::write(cfg.out_dir.join(REPORT_FILE), &text)?;
    Ok(text)
}
