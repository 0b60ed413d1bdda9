//! TOML run configuration with dotted-path overrides.
//!
//! A config file fixes everything an experiment needs; command-line
//! overrides like `train.lr=2e-4` patch individual leaves. The resolved
//! config serializes back to TOML so a run directory can keep a frozen copy
//! of exactly what executed.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Value;

use crate::alloop::{ExperimentSpec, Strategy};
use crate::data::{AcquisitionRule, PhantomConfig};
use crate::model::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("unsupported config version {0} (expected {CONFIG_VERSION})")]
    BadVersion(u32),
    #[error("override {0:?} is not of the form path=value")]
    BadOverride(String),
    #[error("override path {0:?} does not name a config leaf")]
    BadPath(String),
    #[error("override value {value:?} is invalid for {path}")]
    BadValue { path: String, value: String },
    #[error("unknown acquisition rule {0:?}")]
    BadRule(String),
    #[error("unknown strategy {0:?}")]
    BadStrategy(String),
    #[error("split must list four counts, got {0}")]
    BadSplit(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub seed: u64,
    pub volumes: usize,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub classes: u8,
    pub noise_sigma: f64,
    pub small_every: usize,
    pub small_scale: f64,
    pub small_intensity_shift: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let p = PhantomConfig::default();
        PhantomSection {
            seed: 7,
            volumes: p.volumes,
            height: p.height,
            width: p.width,
            depth: p.depth,
            classes: p.classes,
            noise_sigma: p.noise_sigma,
            small_every: p.small_every,
            small_scale: p.small_scale,
            small_intensity_shift: p.small_intensity_shift,
        }
    }
}

impl PhantomSection {
    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            volumes: self.volumes,
            height: self.height,
            width: self.width,
            depth: self.depth,
            classes: self.classes,
            noise_sigma: self.noise_sigma,
            small_every: self.small_every,
            small_scale: self.small_scale,
            small_intensity_shift: self.small_intensity_shift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub rule: String,
    pub strategy: String,
    pub iterations: usize,
    pub budget: usize,
    pub seed: u64,
    /// Volume counts: initial training, unlabeled, validation, test.
    pub split: Vec<usize>,
    pub candidate_factor: f64,
    /// Absent means the rule default (0.5 volume-wise, 0.25 slice-wise).
    pub lambda: Option<f64>,
    pub mi_bins: usize,
    pub upper_bound: bool,
    /// Suite mode: strategies and seeds to cross.
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            rule: "volume".into(),
            strategy: "unc+hres".into(),
            iterations: 6,
            budget: 1,
            seed: 1,
            split: vec![1, 24, 1, 4],
            candidate_factor: 2.0,
            lambda: None,
            mi_bins: 32,
            upper_bound: false,
            strategies: Strategy::ALL.iter().map(|s| s.as_str().to_string()).collect(),
            seeds: (1..=10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub alpha: f64,
    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub dropout: f64,
    pub mc_passes: usize,
    pub hidden: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            alpha: t.alpha,
            gamma: t.gamma,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            steps: t.steps,
            eval_every: t.eval_every,
            dropout: t.dropout,
            mc_passes: t.mc_passes,
            hidden: t.hidden,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            steps: self.steps,
            eval_every: self.eval_every,
            dropout: self.dropout,
            mc_passes: self.mc_passes,
            hidden: self.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub phantom: PhantomSection,
    pub experiment: ExperimentSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            phantom: PhantomSection::default(),
            experiment: ExperimentSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text)?;
        if config.version != CONFIG_VERSION {
            return Err(ConfigError::BadVersion(config.version));
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Apply `path=value` overrides such as `train.lr=2e-4` or
    /// `experiment.strategy=rand`. The leaf must already exist and the value
    /// must parse as the leaf's TOML type.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut tree = Value::try_from(&*self)?;
        for entry in overrides {
            let (path, value) = entry
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(entry.clone()))?;
            let mut node = &mut tree;
            let segments: Vec<&str> = path.split('.').collect();
            let (last, parents) = segments.split_last().ok_or_else(|| ConfigError::BadPath(path.into()))?;
            for seg in parents {
                node = node
                    .get_mut(seg)
                    .ok_or_else(|| ConfigError::BadPath(path.into()))?;
            }
            let leaf = node
                .get_mut(last)
                .ok_or_else(|| ConfigError::BadPath(path.into()))?;
            *leaf = parse_toml_leaf(value, leaf).ok_or_else(|| ConfigError::BadValue {
                path: path.into(),
                value: value.into(),
            })?;
        }
        let patched: RunConfig = tree.try_into().map_err(ConfigError::Parse)?;
        if patched.version != CONFIG_VERSION {
            return Err(ConfigError::BadVersion(patched.version));
        }
        *self = patched;
        Ok(())
    }

    pub fn rule(&self) -> Result<AcquisitionRule, ConfigError> {
        AcquisitionRule::parse(&self.experiment.rule)
            .ok_or_else(|| ConfigError::BadRule(self.experiment.rule.clone()))
    }

    pub fn strategy(&self) -> Result<Strategy, ConfigError> {
        Strategy::parse(&self.experiment.strategy)
            .ok_or_else(|| ConfigError::BadStrategy(self.experiment.strategy.clone()))
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>, ConfigError> {
        self.experiment
            .strategies
            .iter()
            .map(|s| Strategy::parse(s).ok_or_else(|| ConfigError::BadStrategy(s.clone())))
            .collect()
    }

    pub fn split(&self) -> Result<(usize, usize, usize, usize), ConfigError> {
        match self.experiment.split[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(ConfigError::BadSplit(self.experiment.split.len())),
        }
    }

    /// Resolve into a runnable spec; the seed and strategy are the
    /// single-run ones (suite mode substitutes per run).
    pub fn experiment_spec(&self) -> Result<ExperimentSpec, ConfigError> {
        Ok(ExperimentSpec {
            rule: self.rule()?,
            strategy: self.strategy()?,
            iterations: self.experiment.iterations,
            budget: self.experiment.budget,
            seed: self.experiment.seed,
            split: self.split()?,
            candidate_factor: self.experiment.candidate_factor,
            lambda: self.experiment.lambda,
            mi_bins: self.experiment.mi_bins,
            train: self.train.train_config(),
            upper_bound: self.experiment.upper_bound,
        })
    }
}

/// Parse `text` as the same TOML type as `current`.
fn parse_toml_leaf(text: &str, current: &Value) -> Option<Value> {
    match current {
        Value::String(_) => Some(Value::String(text.to_string())),
        Value::Integer(_) => text.parse::<i64>().ok().map(Value::Integer),
        Value::Float(_) => text.parse::<f64>().ok().map(Value::Float),
        Value::Boolean(_) => text.parse::<bool>().ok().map(Value::Boolean),
        Value::Array(items) => {
            let parts: Vec<&str> = if text.is_empty() { vec![] } else { text.split(',').collect() };
            let template = items.first();
            let parsed: Option<Vec<Value>> = parts
                .iter()
                .map(|p| match template {
                    Some(t) => parse_toml_leaf(p, t),
                    // Empty template array: guess integer, the only list
                    // kinds in the schema are numeric.
                    None => p.parse::<i64>().ok().map(Value::Integer),
                })
                .collect();
            parsed.map(Value::Array)
        }
        _ => None,
    }
}
