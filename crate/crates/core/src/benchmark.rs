//! Two-agent benchmark: coupled van der Pol / pendulum slow oscillators,
//! optionally driven through Duffing fast scales and PI actuator loops.
//!
//! Hierarchical state layout (length 10), agent-major:
//! `[x11, x12, y11, y12, w1, x21, x22, y21, y22, w2]`.
//! Flat state layout (length 4): `[x11, x12, x21, x22]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_AGENTS: usize = 2;
pub const FLAT_DIM: usize = 4;
pub const HIER_DIM: usize = 10;
pub const HIER_AGENT_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Flat,
    Hier,
}

impl Variant {
    pub fn state_dim(self) -> usize {
        match self {
            Variant::Flat => FLAT_DIM,
            Variant::Hier => HIER_DIM,
        }
    }

    /// Indices of agent `i`'s slow states in the raw state vector.
    pub fn slow_indices(self, agent: usize) -> [usize; 2] {
        match self {
            Variant::Flat => [2 * agent, 2 * agent + 1],
            Variant::Hier => [HIER_AGENT_DIM * agent, HIER_AGENT_DIM * agent + 1],
        }
    }

    pub fn fast_y_indices(agent: usize) -> [usize; 2] {
        [HIER_AGENT_DIM * agent + 2, HIER_AGENT_DIM * agent + 3]
    }

    pub fn actuator_index(agent: usize) -> usize {
        HIER_AGENT_DIM * agent + 4
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Flat => f.write_str("flat"),
            Variant::Hier => f.write_str("hier"),
        }
    }
}

/// Time-scale configuration: slow step `dt_slow` split into `m` fast
/// substeps of length `tau = dt_slow / m`. Fast dynamics run `m` times
/// faster than the slow ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub dt_slow: f64,
    pub m: usize,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig { dt_slow: 0.1, m: 100 }
    }
}

impl ScaleConfig {
    pub fn new(dt_slow: f64, m: usize) -> Result<Self> {
        let s = ScaleConfig { dt_slow, m };
        s.validate()?;
        Ok(s)
    }

    pub fn tau(&self) -> f64 {
        self.dt_slow / self.m as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("scale factor m must be >= 2, got {}", self.m)));
        }
        if !(self.dt_slow > 0.0 && self.dt_slow.is_finite()) {
            return Err(Error::Config("dt_slow must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlatState {
    pub x1: [f64; 2],
    pub x2: [f64; 2],
}

impl FlatState {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != FLAT_DIM {
            return Err(Error::dims("flat state", FLAT_DIM, v.len()));
        }
        Ok(FlatState {
            x1: [v[0], v[1]],
            x2: [v[2], v[3]],
        })
    }

    pub fn to_array(&self) -> [f64; FLAT_DIM] {
        [self.x1[0], self.x1[1], self.x2[0], self.x2[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HierState {
    pub x1: [f64; 2],
    pub x2: [f64; 2],
    pub y1: [f64; 2],
    pub y2: [f64; 2],
    pub w1: f64,
    pub w2: f64,
}

impl HierState {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != HIER_DIM {
            return Err(Error::dims("hierarchical state", HIER_DIM, v.len()));
        }
        Ok(HierState {
            x1: [v[0], v[1]],
            y1: [v[2], v[3]],
            w1: v[4],
            x2: [v[5], v[6]],
            y2: [v[7], v[8]],
            w2: v[9],
        })
    }

    pub fn to_array(&self) -> [f64; HIER_DIM] {
        [
            self.x1[0], self.x1[1], self.y1[0], self.y1[1], self.w1, self.x2[0], self.x2[1],
            self.y2[0], self.y2[1], self.w2,
        ]
    }
}

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Slow-oscillator accelerations given the force entering each agent
/// (`0.5·u_i` in the flat case, `0.5·y_{i,1}` in the hierarchical case).
fn slow_accelerations(x1: [f64; 2], x2: [f64; 2], force1: f64, force2: f64) -> (f64, f64) {
    let a1 = -(1.0 - x1[0] * x1[0]) * x1[1] - x1[0] + 0.25 * x2[0].sinh() + force1;
    let a2 = -x2[1].sinh() - x2[0].sin() + 0.5 * x1[1].tanh() + force2;
    (a1, a2)
}

pub fn rhs_flat(state: &FlatState, u: [f64; 2]) -> Result<[f64; FLAT_DIM]> {
    check_finite("flat state", &state.to_array())?;
    check_finite("control", &u)?;
    let (a1, a2) = slow_accelerations(state.x1, state.x2, 0.5 * u[0], 0.5 * u[1]);
    Ok([state.x1[1], a1, state.x2[1], a2])
}

/// Fast-scale vector field `(ẏ1, ẏ2, ẇ)` of one agent before the rate
/// multiplier `m` is applied.
pub fn fast_field(x: [f64; 2], y: [f64; 2], w: f64, u: f64) -> [f64; 3] {
    [
        y[1],
        -2.0 * y[1] - y[0] - y[0].powi(3) - 2.0 * w + 0.5 * x[1] * x[1],
        y[1] + (y[0] - u),
    ]
}

pub fn rhs_hier(state: &HierState, u: [f64; 2], scale: &ScaleConfig) -> Result<[f64; HIER_DIM]> {
    check_finite("hierarchical state", &state.to_array())?;
    check_finite("control", &u)?;
    let rate = scale.m as f64;
    let (a1, a2) = slow_accelerations(state.x1, state.x2, 0.5 * state.y1[0], 0.5 * state.y2[0]);
    let f1 = fast_field(state.x1, state.y1, state.w1, u[0]);
    let f2 = fast_field(state.x2, state.y2, state.w2, u[1]);
    Ok([
        state.x1[1],
        a1,
        rate * f1[0],
        rate * f1[1],
        rate * f1[2],
        state.x2[1],
        a2,
        rate * f2[0],
        rate * f2[1],
        rate * f2[2],
    ])
}

/// Vector field for either variant on flat slices.
pub fn rhs(variant: Variant, scale: &ScaleConfig, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
    if u.len() != N_AGENTS {
        return Err(Error::dims("benchmark control", N_AGENTS, u.len()));
    }
    let uu = [u[0], u[1]];
    match variant {
        Variant::Flat => out.copy_from_slice(&rhs_flat(&FlatState::from_slice(x)?, uu)?),
        Variant::Hier => out.copy_from_slice(&rhs_hier(&HierState::from_slice(x)?, uu, scale)?),
    }
    Ok(())
}

/// Raw running cost of agent `i` for the given variant.
pub fn running_cost(variant: Variant, agent: usize, x: &[f64], u: &[f64]) -> f64 {
    match variant {
        Variant::Flat => {
            let [a, b] = variant.slow_indices(agent);
            x[a] * x[a] + x[b] * x[b] + u[agent] * u[agent]
        }
        Variant::Hier => {
            let o = HIER_AGENT_DIM * agent;
            x[o..o + HIER_AGENT_DIM].iter().map(|v| v * v).sum()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_equilibrium() {
        assert_eq!(rhs_flat(&FlatState::default(), [0.0, 0.0]).unwrap(), [0.0; 4]);
        let s = ScaleConfig::default();
        assert_eq!(rhs_hier(&HierState::default(), [0.0, 0.0], &s).unwrap(), [0.0; 10]);
    }

    #[test]
    fn flat_substitutions() {
        let st = FlatState { x1: [1.0, 1.0], x2: [0.0, 0.0] };
        assert_eq!(rhs_flat(&st, [0.0, 0.0]).unwrap()[1], -1.0);
        let st = FlatState { x1: [0.0, 0.0], x2: [1.0, 0.0] };
        let d = rhs_flat(&st, [0.0, 0.0]).unwrap();
        assert!((d[1] - 0.25 * 1f64.sinh()).abs() < 1e-15);
        assert!((d[1] - 0.29380).abs() < 1e-4);
    }

    #[test]
    fn hier_fast_rate_free_parts() {
        let s = ScaleConfig::default();
        let st = HierState { y1: [1.0, 0.0], ..Default::default() };
        let d = rhs_hier(&st, [0.0, 0.0], &s).unwrap();
        assert_eq!(d[3] / s.m as f64, -2.0);
        let st = HierState { x1: [0.0, 1.0], ..Default::default() };
        let d = rhs_hier(&st, [0.0, 0.0], &s).unwrap();
        assert_eq!(d[3] / s.m as f64, 0.5);
    }

    #[test]
    fn kinetic_coupling_is_monotone_in_square() {
        let mut prev = f64::NEG_INFINITY;
        for k in 0..20 {
            let v = k as f64 * 0.1;
            let f = fast_field([0.0, v], [0.0, 0.0], 0.0, 0.0)[1];
            assert!(f >= prev);
            prev = f;
        }
    }

    #[test]
    fn non_finite_rejected() {
        let st = FlatState { x1: [f64::NAN, 0.0], x2: [0.0, 0.0] };
        assert!(matches!(rhs_flat(&st, [0.0, 0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn scale_rejects_m_below_two() {
        assert!(ScaleConfig::new(0.1, 1).is_err());
        let s = ScaleConfig::new(0.1, 100).unwrap();
        assert!((s.tau() * s.m as f64 - s.dt_slow).abs() < 1e-15);
    }

    #[test]
    fn state_layout_roundtrip() {
        let v: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let st = HierState::from_slice(&v).unwrap();
        assert_eq!(st.to_array().to_vec(), v);
        assert_eq!(st.w2, 9.0);
        assert_eq!(Variant::Hier.slow_indices(1), [5, 6]);
    }
}
