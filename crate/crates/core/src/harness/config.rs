//! Experiment configuration and its flat `key = value` file format.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Keys not present keep their defaults, so an empty file is a valid config.
//! [`ExperimentConfig::to_config_string`] writes every key and is accepted
//! back by [`ExperimentConfig::parse`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Allocation, PartitionSpec};
use crate::error::{Error, Result};
use crate::losses::{DistillOptions, FeatureDistillMode, KlDirection};
use crate::protocol::Strategy;

/// Where a FedBSD client's student backbone starts phase 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneInit {
    /// Continue from the client's own previous backbone (teacher is only a target).
    Local,
    /// Overwrite with the received global backbone first.
    Global,
}

/// Which backbone produces the frozen features used to train the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadFeatureSource {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationWeighting {
    Uniform,
    /// Proportional to each uploader's training-set size.
    DataSize,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+ $(,)?) => {
        impl $ty {
            pub const NAMES: &'static [&'static str] = &[$($name),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($variant => $name),+
                }
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(format!("unknown {} '{}' (expected one of: {})", $what, other, Self::NAMES.join(", "))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(Strategy, "strategy", Strategy::FedBsd => "fedbsd", Strategy::FedRep => "fedrep", Strategy::FedAvg => "fedavg", Strategy::Local => "local");
keyword_enum!(BackboneInit, "backbone init", BackboneInit::Local => "local", BackboneInit::Global => "global");
keyword_enum!(HeadFeatureSource, "head feature source", HeadFeatureSource::Global => "global", HeadFeatureSource::Local => "local");
keyword_enum!(AggregationWeighting, "aggregation weighting", AggregationWeighting::Uniform => "uniform", AggregationWeighting::DataSize => "data_size");
keyword_enum!(KlDirection, "kl direction", KlDirection::Forward => "forward", KlDirection::Reverse => "reverse");
keyword_enum!(FeatureDistillMode, "feature distill mode", FeatureDistillMode::SoftmaxKl => "softmax_kl", FeatureDistillMode::Mse => "mse");

/// Scalars driving the federated training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: usize,
    pub participation: f64,
    pub head_epochs: usize,
    pub backbone_epochs: usize,
    /// Local epochs of full-model training for `fedavg` and `local`.
    pub local_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub tau: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub kl_direction: KlDirection,
    pub tau2_rescale: bool,
    pub feature_distill_mode: FeatureDistillMode,
    pub backbone_init: BackboneInit,
    pub head_features: HeadFeatureSource,
    pub aggregation: AggregationWeighting,
    /// Backbone widths; the last one is the feature dimension.
    pub hidden: Vec<usize>,
    /// Fine-tune every head for `finetune_epochs` after the last round.
    pub finetune: bool,
    pub finetune_epochs: usize,
    pub eval_last_k: usize,
    /// Worker threads for client updates and evaluation; 0 uses the global pool.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            participation: 0.1,
            head_epochs: 10,
            backbone_epochs: 5,
            local_epochs: 5,
            lr: 0.01,
            momentum: 0.5,
            tau: 2.0,
            lambda: 1.0,
            batch_size: 50,
            strategy: Strategy::FedBsd,
            seed: 0,
            kl_direction: KlDirection::Forward,
            tau2_rescale: false,
            feature_distill_mode: FeatureDistillMode::SoftmaxKl,
            backbone_init: BackboneInit::Local,
            head_features: HeadFeatureSource::Global,
            aggregation: AggregationWeighting::Uniform,
            hidden: vec![64, 64],
            finetune: false,
            finetune_epochs: 10,
            eval_last_k: 10,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn distill_options(&self) -> DistillOptions {
        DistillOptions {
            tau: self.tau,
            lambda: self.lambda,
            direction: self.kl_direction,
            tau2_rescale: self.tau2_rescale,
            mode: self.feature_distill_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: None, msg });
        if self.rounds < 1 {
            return bad("rounds must be >= 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!("participation must be in (0, 1], got {}", self.participation));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths must be positive, got {:?}", self.hidden));
        }
        if self.eval_last_k == 0 {
            return bad("eval_last_k must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic {
        num_classes: usize,
        dim: usize,
        samples_per_class: usize,
        spread: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            num_classes: 10,
            dim: 32,
            samples_per_class: 600,
            spread: 2.3,
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub partition: PartitionSpec,
    pub data: DataSource,
    /// Used when `allocation = lognormal`; kept so key order does not matter.
    pub lognormal_sigma: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            partition: PartitionSpec {
                num_clients: 100,
                classes_per_client: 2,
                allocation: Allocation::Uniform,
                seed: 0,
            },
            data: DataSource::default(),
            lognormal_sigma: 1.0,
        }
    }
}

/// Every key accepted in a config file, in the order they are written.
pub const CONFIG_KEYS: &[&str] = &[
    "rounds",
    "participation",
    "head_epochs",
    "backbone_epochs",
    "local_epochs",
    "lr",
    "momentum",
    "tau",
    "lambda",
    "batch_size",
    "strategy",
    "seed",
    "kl_direction",
    "tau2_rescale",
    "feature_distill_mode",
    "backbone_init",
    "head_features",
    "aggregation",
    "hidden",
    "finetune",
    "finetune_epochs",
    "eval_last_k",
    "threads",
    "num_clients",
    "classes_per_client",
    "allocation",
    "lognormal_sigma",
    "dataset",
    "num_classes",
    "dim",
    "samples_per_class",
    "spread",
    "idx_images",
    "idx_labels",
];

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse '{v}': {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got '{v}'")),
    }
}

/// Synthetic-source fields, defaulting when the source is currently IDX.
fn synthetic_mut(data: &mut DataSource) -> (&mut usize, &mut usize, &mut usize, &mut f64) {
    if !matches!(data, DataSource::Synthetic { .. }) {
        *data = DataSource::default();
    }
    match data {
        DataSource::Synthetic {
            num_classes,
            dim,
            samples_per_class,
            spread,
        } => (num_classes, dim, samples_per_class, spread),
        DataSource::Idx { .. } => unreachable!(),
    }
}

fn idx_mut(data: &mut DataSource) -> (&mut PathBuf, &mut PathBuf) {
    if !matches!(data, DataSource::Idx { .. }) {
        *data = DataSource::Idx {
            images: PathBuf::new(),
            labels: PathBuf::new(),
        };
    }
    match data {
        DataSource::Idx { images, labels } => (images, labels),
        DataSource::Synthetic { .. } => unreachable!(),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "rounds" => t.rounds = parse(value)?,
            "participation" => t.participation = parse(value)?,
            "head_epochs" => t.head_epochs = parse(value)?,
            "backbone_epochs" => t.backbone_epochs = parse(value)?,
            "local_epochs" => t.local_epochs = parse(value)?,
            "lr" => t.lr = parse(value)?,
            "momentum" => t.momentum = parse(value)?,
            "tau" => t.tau = parse(value)?,
            "lambda" => t.lambda = parse(value)?,
            "batch_size" => t.batch_size = parse(value)?,
            "strategy" => t.strategy = value.parse()?,
            "seed" => {
                t.seed = parse(value)?;
                self.partition.seed = t.seed;
            }
            "kl_direction" => t.kl_direction = value.parse()?,
            "tau2_rescale" => t.tau2_rescale = parse_bool(value)?,
            "feature_distill_mode" => t.feature_distill_mode = value.parse()?,
            "backbone_init" => t.backbone_init = value.parse()?,
            "head_features" => t.head_features = value.parse()?,
            "aggregation" => t.aggregation = value.parse()?,
            "hidden" => {
                t.hidden = value
                    .split(',')
                    .map(|w| parse::<usize>(w.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "finetune" => t.finetune = parse_bool(value)?,
            "finetune_epochs" => t.finetune_epochs = parse(value)?,
            "eval_last_k" => t.eval_last_k = parse(value)?,
            "threads" => t.threads = parse(value)?,
            "num_clients" => self.partition.num_clients = parse(value)?,
            "classes_per_client" => self.partition.classes_per_client = parse(value)?,
            "allocation" => {
                self.partition.allocation = match value {
                    "uniform" => Allocation::Uniform,
                    "lognormal" => Allocation::LogNormal { sigma: self.lognormal_sigma },
                    other => return Err(format!("unknown allocation '{other}' (expected one of: uniform, lognormal)")),
                }
            }
            "lognormal_sigma" => {
                self.lognormal_sigma = parse(value)?;
                if let Allocation::LogNormal { sigma } = &mut self.partition.allocation {
                    *sigma = self.lognormal_sigma;
                }
            }
            "dataset" => match value {
                "synthetic" => {
                    synthetic_mut(&mut self.data);
                }
                "idx" => {
                    idx_mut(&mut self.data);
                }
                other => return Err(format!("unknown dataset '{other}' (expected one of: synthetic, idx)")),
            },
            "num_classes" => *synthetic_mut(&mut self.data).0 = parse(value)?,
            "dim" => *synthetic_mut(&mut self.data).1 = parse(value)?,
            "samples_per_class" => *synthetic_mut(&mut self.data).2 = parse(value)?,
            "spread" => *synthetic_mut(&mut self.data).3 = parse(value)?,
            "idx_images" => *idx_mut(&mut self.data).0 = PathBuf::from(value),
            "idx_labels" => *idx_mut(&mut self.data).1 = PathBuf::from(value),
            other => return Err(format!("unknown key '{other}'; valid keys: {}", CONFIG_KEYS.join(", "))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: Some(i + 1),
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            let key = key.trim();
            if !CONFIG_KEYS.contains(&key) {
                return Err(Error::Config {
                    line: Some(i + 1),
                    msg: format!("unknown key '{key}'; valid keys: {}", CONFIG_KEYS.join(", ")),
                });
            }
            cfg.set(key, value.trim()).map_err(|msg| Error::Config { line: Some(i + 1), msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DataSource::Synthetic { num_classes, .. } = self.data {
            self.partition.validate(num_classes).map_err(|e| Error::Config { line: None, msg: e.to_string() })?;
        }
        Ok(())
    }

    /// `(key, value)` for every key, in [`CONFIG_KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let hidden: Vec<String> = t.hidden.iter().map(usize::to_string).collect();
        let (allocation, sigma) = match self.partition.allocation {
            Allocation::Uniform => ("uniform", self.lognormal_sigma),
            Allocation::LogNormal { sigma } => ("lognormal", sigma),
        };
        let mut out = vec![
            ("rounds", t.rounds.to_string()),
            ("participation", t.participation.to_string()),
            ("head_epochs", t.head_epochs.to_string()),
            ("backbone_epochs", t.backbone_epochs.to_string()),
            ("local_epochs", t.local_epochs.to_string()),
            ("lr", t.lr.to_string()),
            ("momentum", t.momentum.to_string()),
            ("tau", t.tau.to_string()),
            ("lambda", t.lambda.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("strategy", t.strategy.to_string()),
            ("seed", t.seed.to_string()),
            ("kl_direction", t.kl_direction.to_string()),
            ("tau2_rescale", t.tau2_rescale.to_string()),
            ("feature_distill_mode", t.feature_distill_mode.to_string()),
            ("backbone_init", t.backbone_init.to_string()),
            ("head_features", t.head_features.to_string()),
            ("aggregation", t.aggregation.to_string()),
            ("hidden", hidden.join(",")),
            ("finetune", t.finetune.to_string()),
            ("finetune_epochs", t.finetune_epochs.to_string()),
            ("eval_last_k", t.eval_last_k.to_string()),
            ("threads", t.threads.to_string()),
            ("num_clients", self.partition.num_clients.to_string()),
            ("classes_per_client", self.partition.classes_per_client.to_string()),
            ("allocation", allocation.to_string()),
            ("lognormal_sigma", sigma.to_string()),
        ];
        match &self.data {
            DataSource::Synthetic {
                num_classes,
                dim,
                samples_per_class,
                spread,
            } => out.extend([
                ("dataset", "synthetic".to_string()),
                ("num_classes", num_classes.to_string()),
                ("dim", dim.to_string()),
                ("samples_per_class", samples_per_class.to_string()),
                ("spread", spread.to_string()),
            ]),
            DataSource::Idx { images, labels } => out.extend([
                ("dataset", "idx".to_string()),
                ("idx_images", images.display().to_string()),
                ("idx_labels", labels.display().to_string()),
            ]),
        }
        out
    }

    pub fn to_config_string(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        line: None,
        msg: format!("cannot read {}: {e}", path.display()),
    })?;
    ExperimentConfig::parse(&text)
}

pub fn write_config(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_config_string())?;
    Ok(())
}
