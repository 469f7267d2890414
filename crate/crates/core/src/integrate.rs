//! Fixed-step classical Runge-Kutta integration with piecewise-constant
//! controls.

use nalgebra::DMatrix;

use crate::benchmark::{self, ScaleConfig, Variant};
use crate::error::{Error, Result};

pub const DIVERGENCE_NORM: f64 = 1e6;

/// Controls held constant over consecutive intervals of length `interval`.
/// Row `k` of `values` applies on `[k·interval, (k+1)·interval)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSchedule {
    pub interval: f64,
    pub values: DMatrix<f64>,
}

impl ControlSchedule {
    pub fn zeros(interval: f64, n_intervals: usize, dim: usize) -> Self {
        ControlSchedule {
            interval,
            values: DMatrix::zeros(n_intervals, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// One row per recorded time.
    pub states: DMatrix<f64>,
    /// Control active at each recorded time (the last interval's value at the
    /// final time).
    pub controls: DMatrix<f64>,
    pub variant: Option<Variant>,
}

fn steps_in(total: f64, step: f64, what: &str) -> Result<usize> {
    let ratio = total / step;
    let n = ratio.round();
    if !(n >= 0.0) || (ratio - n).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::Config(format!("{what} ({total}) is not an integer multiple of step {step}")));
    }
    Ok(n as usize)
}

/// Integrate `ẋ = rhs(x, u)` from `x0` to `t_end` with RK4 step `step`,
/// recording every `record_every` steps (the initial and final states are
/// always recorded).
pub fn integrate<F>(
    mut rhs: F,
    x0: &[f64],
    schedule: &ControlSchedule,
    t_end: f64,
    step: f64,
    record_every: usize,
) -> Result<Trajectory>
where
    F: FnMut(&[f64], &[f64], &mut [f64]) -> Result<()>,
{
    if !(step > 0.0) {
        return Err(Error::Config("integration step must be positive".into()));
    }
    let n_steps = steps_in(t_end, step, "t_end")?;
    let per_interval = steps_in(schedule.interval, step, "control interval")?.max(1);
    let needed = n_steps.div_ceil(per_interval);
    if schedule.values.nrows() < needed {
        return Err(Error::dims("control schedule intervals", needed, schedule.values.nrows()));
    }
    let record_every = record_every.max(1);
    let n = x0.len();
    let m = schedule.dim();

    let n_records = n_steps / record_every + 1 + usize::from(n_steps % record_every != 0);
    let mut times = Vec::with_capacity(n_records);
    let mut states = Vec::with_capacity(n_records * n);
    let mut controls = Vec::with_capacity(n_records * m);

    let mut x = x0.to_vec();
    let mut u = vec![0.0; m];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];

    let control_row = |k: usize, u: &mut [f64]| {
        let row = (k / per_interval).min(schedule.values.nrows().saturating_sub(1));
        for (j, v) in u.iter_mut().enumerate() {
            *v = schedule.values[(row, j)];
        }
    };

    for k in 0..=n_steps {
        control_row(k.min(n_steps.saturating_sub(1)), &mut u);
        if k % record_every == 0 || k == n_steps {
            times.push(k as f64 * step);
            states.extend_from_slice(&x);
            controls.extend_from_slice(&u);
        }
        if k == n_steps {
            break;
        }
        rhs(&x, &u, &mut k1)?;
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * step * k1[i];
        }
        rhs(&tmp, &u, &mut k2)?;
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * step * k2[i];
        }
        rhs(&tmp, &u, &mut k3)?;
        for i in 0..n {
            tmp[i] = x[i] + step * k3[i];
        }
        rhs(&tmp, &u, &mut k4)?;
        for i in 0..n {
            x[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Divergence {
                time: (k + 1) as f64 * step,
                norm,
            });
        }
    }

    let rows = times.len();
    Ok(Trajectory {
        times,
        states: DMatrix::from_row_slice(rows, n, &states),
        controls: DMatrix::from_row_slice(rows, m, &controls),
        variant: None,
    })
}

/// Default RK4 step for a benchmark variant: `Δt/10` for the flat system,
/// `τ/10` for the hierarchical one.
pub fn default_step(variant: Variant, scale: &ScaleConfig) -> f64 {
    match variant {
        Variant::Flat => scale.dt_slow / 10.0,
        Variant::Hier => scale.tau() / 10.0,
    }
}

/// Where to record a benchmark simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    /// Every slow step `Δt`.
    Slow,
    /// Every fast substep `τ`.
    Fast,
}

/// Simulate the benchmark for `controls.nrows()` slow steps.
pub fn simulate_benchmark(
    variant: Variant,
    scale: &ScaleConfig,
    x0: &[f64],
    controls: &DMatrix<f64>,
    record: Record,
) -> Result<Trajectory> {
    if x0.len() != variant.state_dim() {
        return Err(Error::dims("benchmark initial state", variant.state_dim(), x0.len()));
    }
    let step = default_step(variant, scale);
    let per_slow = steps_in(scale.dt_slow, step, "dt_slow")?;
    let record_every = match record {
        Record::Slow => per_slow,
        Record::Fast => steps_in(scale.tau(), step, "tau")?,
    };
    let schedule = ControlSchedule {
        interval: scale.dt_slow,
        values: controls.clone(),
    };
    let t_end = controls.nrows() as f64 * scale.dt_slow;
    let scale = *scale;
    let mut traj = integrate(
        |x, u, out| benchmark::rhs(variant, &scale, x, u, out),
        x0,
        &schedule,
        t_end,
        step,
        record_every,
    )?;
    traj.variant = Some(variant);
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_one_step() {
        let sched = ControlSchedule::zeros(0.1, 1, 0);
        let tr = integrate(
            |x, _, out| {
                out[0] = -x[0];
                Ok(())
            },
            &[1.0],
            &sched,
            0.1,
            0.1,
            1,
        )
        .unwrap();
        assert_eq!(tr.states.nrows(), 2);
        assert!((tr.states[(1, 0)] - (-0.1f64).exp()).abs() < 1e-6);
        assert!((tr.states[(1, 0)] - 0.9048375).abs() < 1e-6);
    }

    #[test]
    fn zero_field_is_constant() {
        let sched = ControlSchedule::zeros(0.5, 4, 1);
        let tr = integrate(
            |_, _, out| {
                out.fill(0.0);
                Ok(())
            },
            &[0.3, -2.0],
            &sched,
            2.0,
            0.25,
            1,
        )
        .unwrap();
        for r in 0..tr.states.nrows() {
            assert_eq!(tr.states[(r, 0)], 0.3);
            assert_eq!(tr.states[(r, 1)], -2.0);
        }
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rk4_local_error_is_fifth_order() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.3, 1.2, -0.8, -0.1]);
        let x0 = nalgebra::DVector::from_vec(vec![1.0, -0.5]);
        let err = |h: f64| {
            let sched = ControlSchedule::zeros(h, 1, 0);
            let aa = a.clone();
            let tr = integrate(
                move |x, _, out| {
                    out[0] = aa[(0, 0)] * x[0] + aa[(0, 1)] * x[1];
                    out[1] = aa[(1, 0)] * x[0] + aa[(1, 1)] * x[1];
                    Ok(())
                },
                x0.as_slice(),
                &sched,
                h,
                h,
                1,
            )
            .unwrap();
            let exact = (&a * h).exp() * &x0;
            ((tr.states[(1, 0)] - exact[0]).powi(2) + (tr.states[(1, 1)] - exact[1]).powi(2)).sqrt()
        };
        let e1 = err(0.2);
        let e2 = err(0.1);
        let ratio = e1 / e2;
        // halving h should shrink the local error by about 2^5
        assert!(ratio > 25.0 && ratio < 40.0, "ratio {ratio}");
    }

    #[test]
    fn divergence_reports_time() {
        let sched = ControlSchedule::zeros(1.0, 100, 0);
        let err = integrate(
            |x, _, out| {
                out[0] = x[0] * x[0];
                Ok(())
            },
            &[10.0],
            &sched,
            100.0,
            0.01,
            10,
        )
        .unwrap_err();
        match err {
            Error::Divergence { time, .. } => assert!(time > 0.0 && time < 0.2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_multiple_end_time_rejected() {
        let sched = ControlSchedule::zeros(0.1, 10, 0);
        let r = integrate(|_, _, _| Ok(()), &[0.0], &sched, 0.25, 0.1, 1);
        assert!(r.is_err());
    }

    #[test]
    fn controls_switch_per_interval() {
        let sched = ControlSchedule {
            interval: 1.0,
            values: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        };
        let tr = integrate(
            |_, u, out| {
                out[0] = u[0];
                Ok(())
            },
            &[0.0],
            &sched,
            2.0,
            0.5,
            1,
        )
        .unwrap();
        assert!((tr.states[(2, 0)] - 1.0).abs() < 1e-12);
        assert!(tr.states[(4, 0)].abs() < 1e-12);
    }
}
