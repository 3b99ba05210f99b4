//! Experiment configuration.
//!
//! The file format is flat `key = value` text. Keys are dotted, lists are
//! comma-separated and `#` starts a comment:
//!
//! ```text
//! data.generator = two_moons
//! data.n = 400
//! data.theta = 45
//! train.mode = rebm
//! train.alpha = 1.0
//! rounds = 6
//! seeds = 0, 1, 2
//! out = runs/rebm
//! ```
//!
//! Unset keys keep their defaults. [`ExperimentConfig::KEYS`] lists every
//! accepted key.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{gen_gaussian_shift, gen_two_moons_shift, load_csv, DomainDataset};
use crate::error::{Error, Result};
use crate::metrics::KlDirection;
use crate::selftrain::{EnergyEstimator, LambdaPolicy, ModelConfig, PortionSchedule, TrainConfig};

/// Where the source and target sets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum DataSpec {
    /// Two moons; the target is an independent draw rotated by `theta`
    /// degrees about the origin.
    TwoMoons { n: usize, noise: f64, theta: f64, seed: u64 },
    /// Gaussian clusters; the target is translated by `shift`.
    GaussianShift { n: usize, classes: usize, shift: Vec<f64>, seed: u64 },
    /// `f1,...,fD,label` files. Target labels, when present, are used only
    /// for evaluation.
    Csv { source: PathBuf, target: PathBuf, classes: usize },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::TwoMoons { n: 400, noise: 0.1, theta: 45.0, seed: 0 }
    }
}

impl DataSpec {
    /// Builds the source and target sets.
    pub fn load(&self) -> Result<(DomainDataset, DomainDataset)> {
        match self {
            DataSpec::TwoMoons { n, noise, theta, seed } => gen_two_moons_shift(*n, *noise, *theta, *seed),
            DataSpec::GaussianShift { n, classes, shift, seed } => gen_gaussian_shift(*n, *classes, shift, *seed),
            DataSpec::Csv { source, target, classes } => {
                let s = load_csv(source, *classes)?;
                let t = load_csv(target, *classes)?.into_target();
                Ok((s, t))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    /// Output directory. Not part of the run's identity, so left out of
    /// serialized reports.
    #[serde(skip)]
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            rounds: 6,
            seeds: vec![0],
            out: PathBuf::from("ebst-out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|v| !v.is_empty()).map(|v| parse(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "data.generator",
        "data.n",
        "data.noise",
        "data.theta",
        "data.seed",
        "data.classes",
        "data.shift",
        "data.source",
        "data.target",
        "model.hidden",
        "model.pretrain_epochs",
        "model.pretrain_lr",
        "model.pretrain_momentum",
        "model.pretrain_weight_decay",
        "train.mode",
        "train.alpha",
        "train.epsilon",
        "train.portion",
        "train.portion_start",
        "train.portion_step",
        "train.portion_max",
        "train.lr",
        "train.momentum",
        "train.weight_decay",
        "train.epochs",
        "train.batch_size",
        "train.lambda_policy",
        "train.step2_energy",
        "train.estimator",
        "train.sgld_steps",
        "train.sgld_step_size",
        "train.sgld_noise",
        "train.divergence_limit",
        "metrics.kl_direction",
        "rounds",
        "seeds",
        "out",
    ];

    /// Parses config text on top of the defaults. Does not validate.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = HashSet::new();
        // the generator decides which data keys apply, so it goes first
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i as u64 + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                detail: format!("expected key = value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse { line: line_no, detail: format!("duplicate key {key}") });
            }
            entries.push((line_no, key, value));
        }
        entries.sort_by_key(|(_, k, _)| *k != "data.generator");
        for (line_no, key, value) in entries {
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(detail) => Error::Parse { line: line_no, detail },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    /// Reads a config file without validating it. A `.json` path is read as
    /// a run report and its embedded config is used.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_report_json(&text)
        } else {
            Self::parse_str(&text)
        }
    }

    /// [`ExperimentConfig::read`] followed by validation.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg = Self::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The config embedded in a run report.
    pub fn from_report_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Embedded {
            config: ExperimentConfig,
        }
        let embedded: Embedded = serde_json::from_str(text)?;
        Ok(embedded.config)
    }

    /// Sets one key. Used by the file parser and for command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "data.generator" => {
                self.data = match value {
                    "two_moons" => DataSpec::default(),
                    "gaussian_shift" => DataSpec::GaussianShift { n: 400, classes: 3, shift: vec![2.0, 2.0], seed: 0 },
                    "csv" => DataSpec::Csv { source: PathBuf::new(), target: PathBuf::new(), classes: 2 },
                    _ => {
                        return Err(Error::config(format!(
                            "data.generator: expected two_moons, gaussian_shift or csv, got {value:?}"
                        )))
                    }
                }
            }
            "data.n" => match &mut self.data {
                DataSpec::TwoMoons { n, .. } | DataSpec::GaussianShift { n, .. } => *n = parse(key, value)?,
                DataSpec::Csv { .. } => return Err(Error::config("data.n does not apply to csv data")),
            },
            "data.seed" => match &mut self.data {
                DataSpec::TwoMoons { seed, .. } | DataSpec::GaussianShift { seed, .. } => *seed = parse(key, value)?,
                DataSpec::Csv { .. } => return Err(Error::config("data.seed does not apply to csv data")),
            },
            "data.classes" => match &mut self.data {
                DataSpec::GaussianShift { classes, .. } | DataSpec::Csv { classes, .. } => *classes = parse(key, value)?,
                DataSpec::TwoMoons { .. } => return Err(Error::config("two moons always has 2 classes")),
            },
            "data.noise" | "data.theta" => match &mut self.data {
                DataSpec::TwoMoons { noise, theta, .. } => {
                    *(if key == "data.noise" { noise } else { theta }) = parse(key, value)?;
                }
                _ => return Err(Error::config(format!("{key} applies only to two_moons"))),
            },
            "data.shift" => match &mut self.data {
                DataSpec::GaussianShift { shift, .. } => *shift = parse_list(key, value)?,
                _ => return Err(Error::config("data.shift applies only to gaussian_shift")),
            },
            "data.source" | "data.target" => match &mut self.data {
                DataSpec::Csv { source, target, .. } => {
                    *(if key == "data.source" { source } else { target }) = PathBuf::from(value);
                }
                _ => return Err(Error::config(format!("{key} applies only to csv"))),
            },
            "model.hidden" => self.model.hidden = parse_list(key, value)?,
            "model.pretrain_epochs" => self.model.pretrain_epochs = parse(key, value)?,
            "model.pretrain_lr" => self.model.pretrain.lr = parse(key, value)?,
            "model.pretrain_momentum" => self.model.pretrain.momentum = parse(key, value)?,
            "model.pretrain_weight_decay" => self.model.pretrain.weight_decay = parse(key, value)?,
            "train.mode" => t.mode = value.parse()?,
            "train.alpha" => t.alpha = parse(key, value)?,
            "train.epsilon" => t.epsilon = parse(key, value)?,
            "train.portion" => t.portion = PortionSchedule::fixed(parse(key, value)?),
            "train.portion_start" => t.portion.start = parse(key, value)?,
            "train.portion_step" => t.portion.step = parse(key, value)?,
            "train.portion_max" => t.portion.max = parse(key, value)?,
            "train.lr" => t.sgd.lr = parse(key, value)?,
            "train.momentum" => t.sgd.momentum = parse(key, value)?,
            "train.weight_decay" => t.sgd.weight_decay = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lambda_policy" => {
                t.lambda_policy = match value {
                    "recompute" => LambdaPolicy::Recompute,
                    "freeze" => LambdaPolicy::Freeze,
                    _ => return Err(Error::config(format!("{key}: expected recompute or freeze, got {value:?}"))),
                }
            }
            "train.step2_energy" => t.step2_energy = parse_bool(key, value)?,
            "train.estimator" => {
                t.estimator = match value {
                    "direct" => EnergyEstimator::Direct,
                    "contrastive" => EnergyEstimator::Contrastive,
                    _ => return Err(Error::config(format!("{key}: expected direct or contrastive, got {value:?}"))),
                }
            }
            "train.sgld_steps" => t.sgld.steps = parse(key, value)?,
            "train.sgld_step_size" => t.sgld.step_size = parse(key, value)?,
            "train.sgld_noise" => t.sgld.noise_scale = parse(key, value)?,
            "train.divergence_limit" => t.divergence_limit = parse(key, value)?,
            "metrics.kl_direction" => {
                t.kl_direction = match value {
                    "true_to_predicted" => KlDirection::TrueToPredicted,
                    "predicted_to_true" => KlDirection::PredictedToTrue,
                    _ => {
                        return Err(Error::config(format!(
                            "{key}: expected true_to_predicted or predicted_to_true, got {value:?}"
                        )))
                    }
                }
            }
            "rounds" => self.rounds = parse(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.model.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        if let DataSpec::Csv { source, target, .. } = &self.data {
            for p in [source, target] {
                if !p.is_file() {
                    return Err(Error::config(format!("data file {} does not exist", p.display())));
                }
            }
        }
        self.train.validate()
    }
}
