//! Experiment configuration: a flat `key = value` file plus overrides.
//!
//! ```text
//! # comments and blank lines are ignored
//! mode = ace-ensemble
//! lambdas = 0, 0.1, 0.5
//! seeds = 1, 2, 3
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ace_core::models::OptimizerConfig;
use ace_core::{AceCoefficients, AceError, NclCoefficients};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown value {other:?}, expected one of: {}",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

keyword_enum!(Mode {
    AceEnsemble => "ace-ensemble",
    Smoc => "smoc",
    Ncl => "ncl",
});

keyword_enum!(DatasetKind {
    Mnist => "mnist",
    Blobs => "blobs",
    Regression => "regression",
});

keyword_enum!(EvalSplit {
    Test => "test",
    Validation => "validation",
});

keyword_enum!(ReportFormat {
    Csv => "csv",
    Json => "json",
});

keyword_enum!(OptimizerKind {
    Sgd => "sgd",
    Momentum => "momentum",
    Adam => "adam",
});

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub dataset: DatasetKind,
    /// Directory holding the four standard MNIST IDX files.
    pub mnist_dir: PathBuf,
    /// Keep only the first `n` training samples.
    pub train_limit: Option<usize>,
    /// Keep only the first `n` evaluation samples.
    pub eval_limit: Option<usize>,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_spread: f64,
    /// Noise standard deviation of the synthetic regression targets.
    pub synth_noise: f64,
    pub data_seed: u64,
    /// Hidden layer widths. For `smoc` these are the trunk's layers.
    pub hidden: Vec<usize>,
    pub k: usize,
    /// Diversity coefficients to sweep; `γ` values in `ncl` mode.
    pub lambdas: Vec<f64>,
    pub alpha: Option<Vec<f64>>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub report: Option<PathBuf>,
    pub format: ReportFormat,
    pub eval_split: EvalSplit,
    /// Training samples held out when `eval_split = validation`.
    pub validation_holdout: usize,
    /// At λ = 0, give every member its own shuffling.
    pub independent_batches_at_zero: bool,
    pub workers: usize,
    /// Run cells one after another on the calling thread.
    pub deterministic: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::AceEnsemble,
            dataset: DatasetKind::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            train_limit: None,
            eval_limit: None,
            synth_train: 2000,
            synth_test: 1000,
            synth_classes: 4,
            synth_dim: 8,
            synth_spread: 0.6,
            synth_noise: 0.1,
            data_seed: 0,
            hidden: vec![128],
            k: 5,
            lambdas: vec![0.0, 0.05, 0.1, 0.3, 0.5, 0.7],
            alpha: None,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 5,
            batch_size: 32,
            seeds: vec![1, 2, 3],
            report: None,
            format: ReportFormat::Csv,
            eval_split: EvalSplit::Test,
            validation_holdout: 5_000,
            independent_batches_at_zero: true,
            workers: 1,
            deterministic: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::validation(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(CliError::validation(
            key,
            format!("expected true or false, got {other:?}"),
        )),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    match value {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn from_core(e: AceError, list_field: &str) -> CliError {
    match e {
        AceError::Config { field, reason } => {
            let field = match field {
                "lambda" | "gamma" | "gamma_ncl" => list_field,
                other => other,
            };
            CliError::validation(field, reason)
        }
        other => other.into(),
    }
}

impl ExperimentConfig {
    /// Defaults for the synthetic NCL regression study.
    pub fn ncl_demo() -> Self {
        ExperimentConfig {
            mode: Mode::Ncl,
            dataset: DatasetKind::Regression,
            synth_train: 400,
            synth_test: 1000,
            synth_noise: 0.1,
            hidden: vec![16],
            k: 4,
            lambdas: vec![0.0, 0.1, 0.2, 0.3],
            lr: 0.05,
            epochs: 50,
            batch_size: 20,
            ..ExperimentConfig::default()
        }
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "mode" => self.mode = parse(key, value)?,
            "dataset" => self.dataset = parse(key, value)?,
            "mnist_dir" => self.mnist_dir = PathBuf::from(value),
            "train_limit" => self.train_limit = parse_optional(key, value)?,
            "eval_limit" => self.eval_limit = parse_optional(key, value)?,
            "synth_train" => self.synth_train = parse(key, value)?,
            "synth_test" => self.synth_test = parse(key, value)?,
            "synth_classes" => self.synth_classes = parse(key, value)?,
            "synth_dim" => self.synth_dim = parse(key, value)?,
            "synth_spread" => self.synth_spread = parse(key, value)?,
            "synth_noise" => self.synth_noise = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "hidden" => self.hidden = parse_list(key, value)?,
            "k" => self.k = parse(key, value)?,
            "lambdas" => self.lambdas = parse_list(key, value)?,
            "alpha" => {
                self.alpha = match value {
                    "" | "none" => None,
                    v => Some(parse_list(key, v)?),
                }
            }
            "optimizer" => self.optimizer = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "report" => {
                self.report = match value {
                    "" | "none" => None,
                    v => Some(PathBuf::from(v)),
                }
            }
            "format" => self.format = parse(key, value)?,
            "eval_split" => self.eval_split = parse(key, value)?,
            "validation_holdout" => self.validation_holdout = parse(key, value)?,
            "independent_batches_at_zero" => {
                self.independent_batches_at_zero = parse_bool(key, value)?
            }
            "workers" => self.workers = parse(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            other => return Err(CliError::validation(other, "unknown configuration key")),
        }
        Ok(())
    }

    /// Apply an override written as `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::validation(pair, "expected key=value"))?;
        self.set(key.trim(), value)
    }

    /// Apply every setting in a config file's text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::validation(
                    format!("line {}", n + 1),
                    format!("expected key = value in {line:?}"),
                )
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Start from `base`, apply the file if given, then each override.
    pub fn load(base: Self, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = base;
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for pair in overrides {
            cfg.set_pair(pair)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Sgd => OptimizerConfig::Sgd { lr: self.lr },
            OptimizerKind::Momentum => OptimizerConfig::Momentum {
                lr: self.lr,
                momentum: self.momentum,
            },
            OptimizerKind::Adam => OptimizerConfig::Adam {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
        }
    }

    /// ACE coefficients of one sweep cell.
    pub fn ace_coefficients(&self, lambda: f64) -> Result<AceCoefficients> {
        let coeff = AceCoefficients::new(self.k, lambda).map_err(|e| from_core(e, "lambdas"))?;
        match &self.alpha {
            Some(alpha) => coeff
                .with_alpha(alpha.clone())
                .map_err(|e| from_core(e, "lambdas")),
            None => Ok(coeff),
        }
    }

    pub fn ncl_coefficients(&self, gamma: f64) -> Result<NclCoefficients> {
        NclCoefficients::new(self.k, gamma).map_err(|e| from_core(e, "lambdas"))
    }

    /// Check every setting before any data is touched.
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(CliError::validation(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("k", self.k)?;
        positive("epochs", self.epochs)?;
        positive("batch_size", self.batch_size)?;
        positive("workers", self.workers)?;
        if self.lambdas.is_empty() {
            return Err(CliError::validation("lambdas", "need at least one value"));
        }
        if self.seeds.is_empty() {
            return Err(CliError::validation("seeds", "need at least one seed"));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(CliError::validation(
                    "seeds",
                    format!("seed {s} is repeated"),
                ));
            }
        }
        for (i, l) in self.lambdas.iter().enumerate() {
            if self.lambdas[..i].contains(l) {
                return Err(CliError::validation(
                    "lambdas",
                    format!("value {l} is repeated"),
                ));
            }
        }
        if self.hidden.contains(&0) {
            return Err(CliError::validation(
                "hidden",
                "layer widths must be positive",
            ));
        }
        if self.mode == Mode::Smoc && self.hidden.is_empty() {
            return Err(CliError::validation(
                "hidden",
                "smoc needs at least one trunk layer",
            ));
        }
        self.optimizer_config()
            .validate()
            .map_err(|e| from_core(e, "lambdas"))?;

        match self.mode {
            Mode::AceEnsemble | Mode::Smoc => {
                if self.dataset == DatasetKind::Regression {
                    return Err(CliError::validation(
                        "dataset",
                        format!("{} needs a classification dataset", self.mode),
                    ));
                }
                for &lambda in &self.lambdas {
                    self.ace_coefficients(lambda)?;
                }
            }
            Mode::Ncl => {
                if self.dataset != DatasetKind::Regression {
                    return Err(CliError::validation(
                        "dataset",
                        "ncl needs the regression dataset",
                    ));
                }
                if self.alpha.is_some() {
                    return Err(CliError::validation("alpha", "not used in ncl mode"));
                }
                for &gamma in &self.lambdas {
                    self.ncl_coefficients(gamma)?;
                }
            }
        }
        match self.dataset {
            DatasetKind::Mnist => {}
            DatasetKind::Blobs | DatasetKind::Regression => {
                positive("synth_train", self.synth_train)?;
                positive("synth_test", self.synth_test)?;
                if self.dataset == DatasetKind::Blobs {
                    positive("synth_dim", self.synth_dim)?;
                    if self.synth_classes < 2 {
                        return Err(CliError::validation(
                            "synth_classes",
                            "need at least 2 classes",
                        ));
                    }
                    if !(self.synth_spread.is_finite() && self.synth_spread >= 0.0) {
                        return Err(CliError::validation(
                            "synth_spread",
                            "must be finite and >= 0",
                        ));
                    }
                } else if !(self.synth_noise.is_finite() && self.synth_noise >= 0.0) {
                    return Err(CliError::validation(
                        "synth_noise",
                        "must be finite and >= 0",
                    ));
                }
            }
        }
        if self.eval_split == EvalSplit::Validation {
            positive("validation_holdout", self.validation_holdout)?;
        }
        Ok(())
    }

    /// Every resolved setting, as it would be written in a config file.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let opt = |v: &Option<usize>| v.map_or_else(|| "none".to_string(), |n| n.to_string());
        let pairs = [
            ("mode", self.mode.to_string()),
            ("dataset", self.dataset.to_string()),
            ("mnist_dir", self.mnist_dir.display().to_string()),
            ("train_limit", opt(&self.train_limit)),
            ("eval_limit", opt(&self.eval_limit)),
            ("synth_train", self.synth_train.to_string()),
            ("synth_test", self.synth_test.to_string()),
            ("synth_classes", self.synth_classes.to_string()),
            ("synth_dim", self.synth_dim.to_string()),
            ("synth_spread", self.synth_spread.to_string()),
            ("synth_noise", self.synth_noise.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("hidden", join(&self.hidden)),
            ("k", self.k.to_string()),
            ("lambdas", join(&self.lambdas)),
            (
                "alpha",
                self.alpha
                    .as_deref()
                    .map_or_else(|| "none".to_string(), join),
            ),
            ("optimizer", self.optimizer.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seeds", join(&self.seeds)),
            (
                "report",
                self.report
                    .as_ref()
                    .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            ),
            ("format", self.format.to_string()),
            ("eval_split", self.eval_split.to_string()),
            ("validation_holdout", self.validation_holdout.to_string()),
            (
                "independent_batches_at_zero",
                self.independent_batches_at_zero.to_string(),
            ),
            ("workers", self.workers.to_string()),
            ("deterministic", self.deterministic.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}
