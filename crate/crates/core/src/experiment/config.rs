//! Experiment configuration. A TOML file is merged key by key over the
//! defaults of a profile, so every field is optional in the file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::KreissGrid;
use crate::benchmark::{ScaleConfig, Variant};
use crate::control::{Interval, SolveOptions};
use crate::dictionary::{DictionarySet, DictionarySpec, FeatureKind};
use crate::error::{Error, Result};
use crate::fit::FitOptions;

/// Ridge weight used by the profiles. Neighbouring RBF features are
/// nearly collinear on the unit box; with a smaller weight the slow fit of
/// the first agent can pick up a spurious eigenvalue outside the unit
/// circle, and the projection then damps every mode.
pub const BENCHMARK_RIDGE: f64 = 1e-6;

/// Built-in default sets. `Paper` uses the full protocol sizes, `Desk`
/// shrinks the data and control runs to finish in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    #[default]
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile '{other}' (expected paper or desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train_ic: usize,
    pub holdout_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryConfig {
    pub kind: FeatureKind,
    pub x_features: usize,
    pub y_features: usize,
    pub w_features: usize,
    pub bandwidth: f64,
    /// Explicit dictionaries; when present the fields above are ignored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explicit: Option<DictionarySet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub n_test_trajectories: usize,
    pub test_horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub horizon: usize,
    pub n_control_ic: usize,
    pub state_box: Interval,
    pub control_box: Interval,
    /// Initial slow states are drawn uniformly from `±ic_half_width`.
    pub ic_half_width: f64,
    /// Drop the cross-agent blocks of the state matrix before solving.
    pub decoupled: bool,
    /// Write per-IC trajectory CSVs.
    pub write_trajectories: bool,
    pub solver: SolveOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlInput {
    Zero,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_ic: usize,
    pub steps: usize,
    pub ic_half_width: f64,
    pub controls: ControlInput,
    /// Explicit initial states (full benchmark state per row); overrides
    /// `n_ic` and sampling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// Master seed; the per-stage seeds are fixed offsets of it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scale: ScaleConfig,
    pub data: DataConfig,
    pub dictionary: DictionaryConfig,
    pub fit: FitOptions,
    pub evaluation: EvaluationConfig,
    pub control: ControlConfig,
    pub analysis: KreissGrid,
    pub simulate: SimulateConfig,
}

/// Seeds of the individual stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub dictionary: u64,
    pub evaluation: u64,
    pub control: u64,
    pub simulate: u64,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let (n_train_ic, n_control_ic) = match profile {
            Profile::Paper => (10_000, 100),
            Profile::Desk => (2000, 20),
        };
        ExperimentConfig {
            variant: Variant::Flat,
            seed: 1,
            out_dir: PathBuf::from("out"),
            scale: ScaleConfig::default(),
            data: DataConfig {
                n_train_ic,
                holdout_fraction: 0.1,
            },
            dictionary: DictionaryConfig {
                kind: FeatureKind::GaussianRbf,
                x_features: 12,
                y_features: 12,
                w_features: 4,
                bandwidth: 1.0,
                explicit: None,
            },
            fit: FitOptions {
                ridge: BENCHMARK_RIDGE,
                ..FitOptions::default()
            },
            evaluation: EvaluationConfig {
                n_test_trajectories: 100,
                test_horizon: 100,
            },
            control: ControlConfig {
                horizon: 50,
                n_control_ic,
                state_box: Interval::symmetric(1.0),
                control_box: Interval::symmetric(1.0),
                ic_half_width: 0.8,
                decoupled: false,
                write_trajectories: true,
                solver: SolveOptions::default(),
            },
            analysis: KreissGrid::default(),
            simulate: SimulateConfig {
                n_ic: 10,
                steps: 100,
                ic_half_width: 1.0,
                controls: ControlInput::Zero,
                initial: None,
            },
        }
    }

    /// Parse TOML text over the defaults of `profile` and validate.
    pub fn from_toml_str(text: &str, profile: Profile) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config parse error: {e}")))?;
        let base = toml::Table::try_from(ExperimentConfig::profile(profile))
            .map_err(|e| Error::Config(format!("default config: {e}")))?;
        let mut merged = toml::Value::Table(base);
        merge(&mut merged, toml::Value::Table(user));
        let cfg: ExperimentConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text, profile)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds {
            data: s,
            split: s.wrapping_add(1),
            evaluation: s.wrapping_add(2),
            control: s.wrapping_add(3),
            simulate: s.wrapping_add(4),
            dictionary: s.wrapping_add(100),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        self.fit.validate()?;
        let counts = [
            ("data.n_train_ic", self.data.n_train_ic),
            ("evaluation.n_test_trajectories", self.evaluation.n_test_trajectories),
            ("evaluation.test_horizon", self.evaluation.test_horizon),
            ("control.horizon", self.control.horizon),
            ("control.n_control_ic", self.control.n_control_ic),
            ("simulate.steps", self.simulate.steps),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        match &self.simulate.initial {
            Some(rows) if rows.is_empty() => return Err(Error::Config("simulate.initial is empty".into())),
            Some(rows) => {
                if let Some(r) = rows.iter().find(|r| r.len() != self.variant.state_dim()) {
                    return Err(Error::dims("simulate.initial row", self.variant.state_dim(), r.len()));
                }
            }
            None if self.simulate.n_ic == 0 => {
                return Err(Error::Config("simulate.n_ic must be at least 1".into()));
            }
            None => {}
        }
        let h = self.data.holdout_fraction;
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::Config(format!("data.holdout_fraction must lie in (0, 1), got {h}")));
        }
        for (name, v) in [
            ("control.ic_half_width", self.control.ic_half_width),
            ("simulate.ic_half_width", self.simulate.ic_half_width),
            ("dictionary.bandwidth", self.dictionary.bandwidth),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("control.state_box", self.control.state_box), ("control.control_box", self.control.control_box)] {
            if !(b.lo <= b.hi) || b.lo.is_nan() || b.hi.is_nan() {
                return Err(Error::Config(format!("{name} has lo > hi")));
            }
        }
        let w = self.control.ic_half_width;
        if !self.control.state_box.contains(w, 0.0) || !self.control.state_box.contains(-w, 0.0) {
            return Err(Error::Config("control.ic_half_width exceeds the state box".into()));
        }
        if self.analysis.radii == 0 || self.analysis.angles == 0 {
            return Err(Error::Config("analysis grid must have radii and angles".into()));
        }
        if let Some(d) = &self.dictionary.explicit {
            d.validate()?;
            if d.is_hierarchical() != (self.variant == Variant::Hier) {
                return Err(Error::Config("explicit dictionaries do not match the variant".into()));
            }
        }
        Ok(())
    }

    /// Dictionaries of the run: the explicit set if given, otherwise seeded
    /// feature sets of the configured kind for every agent.
    pub fn dictionaries(&self) -> Result<DictionarySet> {
        if let Some(d) = &self.dictionary.explicit {
            return Ok(d.clone());
        }
        let dc = &self.dictionary;
        let base = self.seeds().dictionary;
        let make = |raw: usize, n: usize, seed: u64| match dc.kind {
            FeatureKind::GaussianRbf => DictionarySpec::gaussian_rbf(raw, n, dc.bandwidth, seed),
            FeatureKind::Polynomial => DictionarySpec::polynomial(raw, n),
        };
        let agents = 0..2u64;
        let x = agents.clone().map(|i| make(2, dc.x_features, base + i)).collect();
        let u = agents.clone().map(|_| DictionarySpec::identity(1)).collect();
        let (y, w) = match self.variant {
            Variant::Flat => (Vec::new(), Vec::new()),
            Variant::Hier => (
                agents.clone().map(|i| make(2, dc.y_features, base + 10 + i)).collect(),
                agents.map(|i| make(1, dc.w_features, base + 20 + i)).collect(),
            ),
        };
        let set = DictionarySet { x, u, y, w };
        set.validate()?;
        Ok(set)
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
