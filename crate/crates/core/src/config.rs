//! Resolved run configuration and its flat `key = value` text form.
//!
//! Resolution order, later wins: built-in defaults, the `NFSAILS_SEED`
//! environment variable (seed only), a config file, command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::flow::ModelShape;
use crate::metrics::{parse_metric_list, EvalOptions, Metric};
use crate::plot::PlotOptions;
use crate::samplers::{ProposalMode, SamplerConfig};
use crate::targets::TargetSpec;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "NFSAILS_SEED";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleMethod {
    #[default]
    Sails,
    Naive,
}

impl fmt::Display for SampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleMethod::Sails => "sails",
            SampleMethod::Naive => "naive",
        })
    }
}

impl FromStr for SampleMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sails" => Ok(SampleMethod::Sails),
            "naive" => Ok(SampleMethod::Naive),
            _ => Err("expected `sails` or `naive`".into()),
        }
    }
}

/// Every key accepted in config files, in `run.cfg` order.
pub const KEYS: &[&str] = &[
    "target",
    "seed",
    "out",
    "checkpoint",
    "samples",
    "diagnostics",
    "epochs",
    "batch_size",
    "dataset_size",
    "learning_rate",
    "clip_norm",
    "layers",
    "hidden",
    "method",
    "n",
    "eps",
    "p",
    "burn_in",
    "thin",
    "mode",
    "adapt",
    "chains",
    "metrics",
    "k_nn",
    "alpha",
    "level_samples",
    "levelset",
    "target_samples",
    "width",
    "height",
    "grid",
    "seeds",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub target: TargetSpec,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub diagnostics: Option<PathBuf>,
    pub train: TrainConfig,
    pub method: SampleMethod,
    pub sampler: SamplerConfig,
    pub chains: usize,
    pub metrics: Vec<Metric>,
    pub eval: EvalOptions,
    pub plot: PlotOptions,
    /// Repetition seeds for `repro`.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            target: TargetSpec::mixture(2),
            seed: 0,
            out: PathBuf::from("."),
            checkpoint: None,
            samples: None,
            diagnostics: None,
            train: TrainConfig::default(),
            method: SampleMethod::default(),
            sampler: SamplerConfig::default(),
            chains: 1,
            metrics: Metric::ALL.to_vec(),
            eval: EvalOptions::default(),
            plot: PlotOptions::default(),
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Defaults with the seed taken from `env_seed` when present.
    pub fn with_env_seed(env_seed: Option<&str>) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(s) = env_seed {
            c.set("seed", s.trim()).map_err(|_| ConfigError::Value {
                key: SEED_ENV.into(),
                value: s.into(),
                reason: "expected an unsigned integer".into(),
            })?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "target" => self.target = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = optional_path(value),
            "samples" => self.samples = optional_path(value),
            "diagnostics" => self.diagnostics = optional_path(value),
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "dataset_size" => self.train.dataset_size = parse(key, value)?,
            "learning_rate" => self.train.adam.learning_rate = parse(key, value)?,
            "clip_norm" => self.train.clip_norm = parse(key, value)?,
            "layers" => self.train.shape.layers = parse(key, value)?,
            "hidden" => self.train.shape.hidden = parse_list(key, value)?,
            "method" => self.method = parse(key, value)?,
            "n" => self.sampler.n_samples = parse(key, value)?,
            "eps" => self.sampler.eps = parse(key, value)?,
            "p" => self.sampler.p = parse(key, value)?,
            "burn_in" => self.sampler.burn_in = parse(key, value)?,
            "thin" => self.sampler.thin = parse(key, value)?,
            "mode" => self.sampler.mode = parse::<ProposalMode>(key, value)?,
            "adapt" => self.sampler.adapt_step_size = parse(key, value)?,
            "chains" => self.chains = parse(key, value)?,
            "metrics" => {
                self.metrics = parse_metric_list(value).map_err(|e| ConfigError::Value {
                    key: key.into(),
                    value: value.into(),
                    reason: e.to_string(),
                })?
            }
            "k_nn" => self.eval.k_nn = parse(key, value)?,
            "alpha" => self.eval.alpha = parse(key, value)?,
            "level_samples" => {
                let m = parse(key, value)?;
                self.eval.level_samples = m;
                self.plot.level_samples = m;
            }
            "levelset" => {
                self.plot.levelset = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "target_samples" => self.plot.target_samples = parse(key, value)?,
            "width" => self.plot.width = parse(key, value)?,
            "height" => self.plot.height = parse(key, value)?,
            "grid" => self.plot.grid = parse(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "target" => self.target.to_string(),
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "checkpoint" => path_text(&self.checkpoint),
            "samples" => path_text(&self.samples),
            "diagnostics" => path_text(&self.diagnostics),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "dataset_size" => self.train.dataset_size.to_string(),
            "learning_rate" => self.train.adam.learning_rate.to_string(),
            "clip_norm" => self.train.clip_norm.to_string(),
            "layers" => self.train.shape.layers.to_string(),
            "hidden" => join(&self.train.shape.hidden),
            "method" => self.method.to_string(),
            "n" => self.sampler.n_samples.to_string(),
            "eps" => self.sampler.eps.to_string(),
            "p" => self.sampler.p.to_string(),
            "burn_in" => self.sampler.burn_in.to_string(),
            "thin" => self.sampler.thin.to_string(),
            "mode" => self.sampler.mode.to_string(),
            "adapt" => self.sampler.adapt_step_size.to_string(),
            "chains" => self.chains.to_string(),
            "metrics" => join(&self.metrics),
            "k_nn" => self.eval.k_nn.to_string(),
            "alpha" => self.eval.alpha.to_string(),
            "level_samples" => self.eval.level_samples.to_string(),
            "levelset" => self.plot.levelset.map_or("none".into(), |a| a.to_string()),
            "target_samples" => self.plot.target_samples.to_string(),
            "width" => self.plot.width.to_string(),
            "height" => self.plot.height.to_string(),
            "grid" => self.plot.grid.to_string(),
            "seeds" => join(&self.seeds),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, path: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: path.into(),
                line: i + 1,
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Copies the master seed into every component and fixes the model
    /// dimension to the target's.
    pub fn finish(&mut self) {
        self.train.seed = self.seed;
        self.sampler.seed = self.seed;
        self.eval.seed = self.seed;
        self.plot.seed = self.seed;
        self.train.shape = ModelShape {
            dim: 2,
            ..self.train.shape.clone()
        };
    }

    /// The `run.cfg` text: every key, one per line, in [`KEYS`] order.
    pub fn to_cfg_string(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }
}
