//! JSON experiment configuration.
//!
//! Matrices accept either a plain number (a 1×1 matrix) or a list of rows;
//! vectors accept a number or a list. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::grad::{IterationSettings, TargetFunction};
use crate::lqr::SystemSpec;
use crate::qp::BoxBounds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Scalar(v) => Ok(DMatrix::from_element(1, 1, *v)),
            MatrixSpec::Rows(rows) => {
                let ncols = rows.first().map_or(0, Vec::len);
                if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
                    return Err(Error::Config(format!(
                        "matrix '{name}' must be a non-empty list of equal-length rows"
                    )));
                }
                Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Scalar(f64),
    Values(Vec<f64>),
}

impl VectorSpec {
    fn to_vector(&self) -> DVector<f64> {
        match self {
            VectorSpec::Scalar(v) => DVector::from_element(1, *v),
            VectorSpec::Values(vs) => DVector::from_column_slice(vs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub a: MatrixSpec,
    pub b: MatrixSpec,
    pub c: MatrixSpec,
    pub q: MatrixSpec,
    pub r: MatrixSpec,
    pub horizon: usize,
    pub x0: VectorSpec,
}

impl SystemConfig {
    /// `A = C = Q = R = 1`, `B = -1`, `x0 = 1`.
    pub fn battery_scalar(horizon: usize) -> Self {
        SystemConfig {
            a: MatrixSpec::Scalar(1.0),
            b: MatrixSpec::Scalar(-1.0),
            c: MatrixSpec::Scalar(1.0),
            q: MatrixSpec::Scalar(1.0),
            r: MatrixSpec::Scalar(1.0),
            horizon,
            x0: VectorSpec::Scalar(1.0),
        }
    }

    pub fn build(&self) -> Result<SystemSpec> {
        SystemSpec::new(
            self.a.to_matrix("a")?,
            self.b.to_matrix("b")?,
            self.c.to_matrix("c")?,
            self.q.to_matrix("q")?,
            self.r.to_matrix("r")?,
            self.horizon,
            self.x0.to_vector(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Closed-form worst-case cost perturbation.
    CostAdv,
    /// Uniform direction on the sphere of radius δ.
    Random,
    MaxAction,
    MinAction,
    L1,
    /// Gradient attack on the cost target.
    CostGradient,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::CostAdv => "cost-adv",
            Scenario::Random => "random",
            Scenario::MaxAction => "max-action",
            Scenario::MinAction => "min-action",
            Scenario::L1 => "l1",
            Scenario::CostGradient => "cost-gradient",
        }
    }

    /// Target of a gradient scenario.
    pub fn target(self) -> Option<TargetFunction> {
        match self {
            Scenario::MaxAction => Some(TargetFunction::MaxAction),
            Scenario::MinAction => Some(TargetFunction::MinAction),
            Scenario::L1 => Some(TargetFunction::L1Energy),
            Scenario::CostGradient => Some(TargetFunction::CostChange),
            Scenario::CostAdv | Scenario::Random => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Random ARIMA(2,1,2) windows drawn from the experiment seed.
    Arima { count: usize },
    /// Windows over one column of a CSV file. Relative paths resolve against
    /// the config file's directory.
    Csv {
        path: PathBuf,
        column: String,
        /// Defaults to the horizon (non-overlapping windows).
        #[serde(default)]
        stride: Option<usize>,
        /// Keep at most this many windows (the first ones).
        #[serde(default)]
        max_windows: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxKeyword {
    /// `±1.5 ×` the 95th percentile of `|u*|` over the unattacked dataset.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    /// Per-step (length m or n) or stacked bounds; `null` means unbounded.
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

impl BoundsSpec {
    pub fn to_bounds(&self) -> BoxBounds {
        let conv = |v: &[Option<f64>], missing: f64| {
            DVector::from_iterator(v.len(), v.iter().map(|x| x.unwrap_or(missing)))
        };
        BoxBounds::new(
            conv(&self.lower, f64::NEG_INFINITY),
            conv(&self.upper, f64::INFINITY),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionBoxConfig {
    Keyword(BoxKeyword),
    Bounds(BoundsSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AttackMode {
    SingleStep,
    Iterated {
        #[serde(default = "default_steps")]
        steps: usize,
        /// Defaults to δ/10.
        #[serde(default)]
        step_size: Option<f64>,
    },
}

fn default_steps() -> usize {
    IterationSettings::default().steps
}

impl Default for AttackMode {
    fn default() -> Self {
        AttackMode::Iterated {
            steps: default_steps(),
            step_size: None,
        }
    }
}

fn default_dataset() -> DatasetConfig {
    DatasetConfig::Arima { count: 100 }
}

fn default_deltas() -> Vec<f64> {
    vec![0.3, 1.0, 3.0]
}

fn default_scenarios() -> Vec<Scenario> {
    vec![
        Scenario::CostAdv,
        Scenario::Random,
        Scenario::MaxAction,
        Scenario::L1,
    ]
}

fn default_action_box() -> Option<ActionBoxConfig> {
    Some(ActionBoxConfig::Keyword(BoxKeyword::Auto))
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<Scenario>,
    #[serde(default = "default_dataset")]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub normalization: Normalization,
    /// Action box for the constrained controller; `null` disables it.
    #[serde(default = "default_action_box")]
    pub action_box: Option<ActionBoxConfig>,
    #[serde(default)]
    pub state_box: Option<BoundsSpec>,
    #[serde(default)]
    pub attack_mode: AttackMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Scalar battery system, `T = 50`, 100 ARIMA windows, δ ∈ {0.3, 1, 3}.
    pub fn arima_profile(seed: u64) -> Self {
        ExperimentConfig {
            system: SystemConfig::battery_scalar(50),
            deltas: default_deltas(),
            scenarios: default_scenarios(),
            dataset: default_dataset(),
            normalization: Normalization::None,
            action_box: default_action_box(),
            state_box: None,
            attack_mode: AttackMode::default(),
            seed,
            output_dir: default_output_dir(),
        }
    }

    /// Scalar battery system, `T = 120`, z-scored demand windows, δ ∈ {2, 7, 20}.
    pub fn csv_profile(path: PathBuf, column: String, seed: u64) -> Self {
        ExperimentConfig {
            system: SystemConfig::battery_scalar(120),
            deltas: vec![2.0, 7.0, 20.0],
            dataset: DatasetConfig::Csv {
                path,
                column,
                stride: None,
                max_windows: None,
            },
            normalization: Normalization::ZscoreGlobal,
            ..Self::arima_profile(seed)
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative dataset paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json_str(&text)?;
        if let DatasetConfig::Csv { path: data, .. } = &mut cfg.dataset {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() {
            return Err(Error::Config("at least one delta is required".into()));
        }
        if self.deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::Config("deltas must be positive and finite".into()));
        }
        if self.deltas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("deltas must be strictly ascending".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Config("at least one scenario is required".into()));
        }
        let mut seen = self.scenarios.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.scenarios.len() {
            return Err(Error::Config("scenarios must not repeat".into()));
        }
        if let AttackMode::Iterated { steps, step_size } = self.attack_mode {
            if steps == 0 {
                return Err(Error::Config("iterated attack needs steps >= 1".into()));
            }
            if let Some(h) = step_size {
                if !(h > 0.0 && h.is_finite()) {
                    return Err(Error::Config("step_size must be positive".into()));
                }
            }
        }
        if let DatasetConfig::Csv { stride: Some(0), .. } = self.dataset {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        self.system.build()?;
        Ok(())
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        self.system.build()
    }

    pub fn iteration_settings(&self) -> Option<IterationSettings> {
        match self.attack_mode {
            AttackMode::SingleStep => None,
            AttackMode::Iterated { steps, step_size } => Some(IterationSettings { steps, step_size }),
        }
    }
}
