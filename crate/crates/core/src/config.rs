//! TOML run configuration. Training hyperparameters sit at the top level
//! under their conventional names; planner switches live in `[edp]` and
//! evaluation grids in `[experiment]`. Every key is optional and defaults to
//! the reference setup.
//!
//! ```toml
//! seed = 0
//! planning_budget = 64
//! output_dir = "runs"
//!
//! [edp]
//! c = 0.0
//! reuse_tree = true
//! block_loops = true
//! eta = 0.0
//! charge_loops = false
//!
//! [experiment]
//! budgets = [8, 16, 32, 64, 128]
//! c_values = [0.0, 0.1, 0.5, 1.0, 2.0]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::edp::EdpConfig;
use crate::error::{Error, Result};
use crate::experiments::{DEFAULT_BUDGETS, DEFAULT_C_VALUES, DEFAULT_HORIZON, DEFAULT_SEEDS};
use crate::gridworld::MazeVariant;
use crate::search::{ExpansionSampling, SelectionRule};
use crate::training::{default_iterations, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdpSection {
    pub c: f64,
    pub rule: SelectionRule,
    pub reuse_tree: bool,
    pub max_reuses: Option<usize>,
    pub block_loops: bool,
    pub eta: f64,
    pub expansion: Option<ExpansionSampling>,
    pub charge_loops: bool,
}

impl Default for EdpSection {
    fn default() -> Self {
        let d = EdpConfig::default();
        EdpSection {
            c: d.c,
            rule: d.rule,
            reuse_tree: d.reuse_tree,
            max_reuses: d.max_reuses,
            block_loops: d.block_loops,
            eta: d.eta,
            expansion: d.expansion,
            charge_loops: d.charge_loops,
        }
    }
}

impl EdpSection {
    pub fn to_config(&self) -> EdpConfig {
        EdpConfig {
            c: self.c,
            rule: self.rule,
            reuse_tree: self.reuse_tree,
            max_reuses: self.max_reuses,
            block_loops: self.block_loops,
            eta: self.eta,
            expansion: self.expansion,
            charge_loops: self.charge_loops,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub budgets: Vec<usize>,
    pub c_values: Vec<f64>,
    pub train_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
    pub horizon: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            budgets: DEFAULT_BUDGETS.to_vec(),
            c_values: DEFAULT_C_VALUES.to_vec(),
            train_seeds: (0..DEFAULT_SEEDS as u64).collect(),
            eval_seeds: (0..DEFAULT_SEEDS as u64).collect(),
            horizon: DEFAULT_HORIZON,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Whether `iterations` was given explicitly; otherwise it follows the
    /// maze variant.
    #[serde(skip)]
    pub iterations_set: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub edp: EdpSection,
    pub experiment: ExperimentSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            train: TrainConfig::default(),
            iterations_set: false,
            output_dir: None,
            edp: EdpSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

fn config_err(key: impl Into<String>, message: impl ToString) -> Error {
    Error::Config {
        key: key.into(),
        message: message.to_string(),
    }
}

fn section<T: Default + for<'de> Deserialize<'de>>(value: Option<toml::Value>, name: &str) -> Result<T> {
    let Some(value) = value else {
        return Ok(T::default());
    };
    let toml::Value::Table(table) = value else {
        return Err(config_err(name, "expected a table"));
    };
    // Deserialize key by key first, so an error names the offending key.
    for (k, v) in &table {
        let mut single = toml::Table::new();
        single.insert(k.clone(), v.clone());
        T::deserialize(single).map_err(|e| config_err(format!("{name}.{k}"), e.message()))?;
    }
    T::deserialize(table).map_err(|e| config_err(name, e.message()))
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Config> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err("<file>", e.message()))?;
        let edp = section(table.remove("edp"), "edp")?;
        let experiment = section(table.remove("experiment"), "experiment")?;
        let output_dir = match table.remove("output_dir") {
            None => None,
            Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => return Err(config_err("output_dir", "expected a string")),
        };
        let iterations_set = table.contains_key("iterations");
        for (k, v) in &table {
            let mut single = toml::Table::new();
            single.insert(k.clone(), v.clone());
            TrainConfig::deserialize(single).map_err(|e| config_err(k.as_str(), e.message()))?;
        }
        let train = TrainConfig::deserialize(table).map_err(|e| config_err("<top level>", e.message()))?;
        let cfg = Config {
            train,
            iterations_set,
            output_dir,
            edp,
            experiment,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.edp
            .to_config()
            .validate()
            .map_err(|e| config_err("edp", e))?;
        let x = &self.experiment;
        if x.budgets.is_empty() || x.budgets.contains(&0) {
            return Err(config_err("experiment.budgets", "must be a non-empty list of positive integers"));
        }
        if x.c_values.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(config_err("experiment.c_values", "must be finite and non-negative"));
        }
        if x.train_seeds.is_empty() || x.eval_seeds.is_empty() {
            return Err(config_err("experiment", "seed lists must be non-empty"));
        }
        if x.horizon == 0 {
            return Err(config_err("experiment.horizon", "must be positive"));
        }
        Ok(())
    }

    /// Training settings for one variant and seed.
    pub fn train_config(&self, variant: MazeVariant, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: if self.iterations_set {
                self.train.iterations
            } else {
                default_iterations(variant)
            },
            seed,
            ..self.train.clone()
        }
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
