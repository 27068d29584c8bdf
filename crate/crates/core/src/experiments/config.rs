//! `key = value` run configuration files.
//!
//! Blank lines and text after `#` are ignored. Every key must be known.
//! Lists are comma separated.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, Surrogate};
use crate::models::{Attention, Backbone};
use crate::trainer::{NormScope, TrainConfig};

use super::sbm::SbmSpec;

/// Overrides the configured seed when set.
pub const SEED_ENV: &str = "GINIGRAPH_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    /// Cosine between adjacency rows.
    #[default]
    Topo,
    /// Cosine between feature rows, sensitive columns masked.
    Attr,
}

impl std::str::FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topo" => Ok(SimilarityMode::Topo),
            "attr" => Ok(SimilarityMode::Attr),
            other => Err(Error::Config(format!("unknown similarity mode '{other}'"))),
        }
    }
}

/// How nodes are grouped for the group fairness term and metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "by")]
pub enum Grouping {
    #[default]
    Sensitive,
    /// k-means on the features, k chosen by the elbow rule.
    Kmeans { k_max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub similarity: SimilarityMode,
    /// Feature columns hidden from attribute similarity and clustering.
    pub sensitive_columns: Vec<usize>,
    pub grouping: Grouping,
    /// Train, validation and test fractions of the labeled nodes.
    pub split: [f64; 3],
    pub sbm: SbmSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            similarity: SimilarityMode::Topo,
            sensitive_columns: vec![0],
            grouping: Grouping::Sensitive,
            split: [0.5, 0.25, 0.25],
            sbm: SbmSpec::default(),
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key} = {value}: {why}"))
}

pub(crate) fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

pub(crate) fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| num(key, v.trim())).collect()
}

pub fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "expected on or off")),
    }
}

/// Splits a file into `(line number, key, value)` triples.
pub(crate) fn entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", k + 1)))?;
        out.push((k + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "backbone" => t.backbone = value.parse::<Backbone>()?,
            "hidden" => t.hidden = num(key, value)?,
            "pretrain_epochs" => t.pretrain_epochs = num(key, value)?,
            "pretrain_lr" => t.pretrain_lr = num(key, value)?,
            "max_epochs" => t.max_epochs = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "patience" => t.patience = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "delta" => t.delta = num(key, value)?,
            "top_k" => t.top_k = num(key, value)?,
            "gradnorm" => t.gradnorm = parse_switch(key, value)?,
            "beta1" => t.beta[0] = num(key, value)?,
            "beta2" => t.beta[1] = num(key, value)?,
            "beta3" => t.beta[2] = num(key, value)?,
            "beta_lr" => t.beta_lr = num(key, value)?,
            "norm_scope" => {
                t.norm_scope = match value {
                    "shared" => NormScope::Shared,
                    "all" => NormScope::All,
                    _ => return Err(bad(key, value, "expected shared or all")),
                }
            }
            "surrogate" => t.surrogate = losses::parse_surrogate(value)?,
            "temperature" => match &mut t.surrogate {
                Some(Surrogate::Softmax { temperature }) => *temperature = num(key, value)?,
                _ => return Err(bad(key, value, "needs surrogate = softmax first")),
            },
            "topk_fraction" => match &mut t.surrogate {
                Some(Surrogate::TopK { fraction }) => *fraction = num(key, value)?,
                _ => return Err(bad(key, value, "needs surrogate = topk first")),
            },
            "attention" => {
                t.attention = if parse_switch(key, value)? {
                    Attention::On
                } else {
                    Attention::Off
                }
            }
            "eo_threshold" => t.eo_threshold = num(key, value)?,
            "freeze_backbone" => t.freeze_backbone = parse_switch(key, value)?,
            "similarity" => self.similarity = value.parse()?,
            "sensitive_columns" => {
                self.sensitive_columns = if value.is_empty() { Vec::new() } else { list(key, value)? }
            }
            "grouping" => {
                self.grouping = match value {
                    "sensitive" => Grouping::Sensitive,
                    "kmeans" => Grouping::Kmeans { k_max: 10 },
                    _ => return Err(bad(key, value, "expected sensitive or kmeans")),
                }
            }
            "k_max" => match &mut self.grouping {
                Grouping::Kmeans { k_max } => *k_max = num(key, value)?,
                Grouping::Sensitive => return Err(bad(key, value, "needs grouping = kmeans first")),
            },
            "split" => {
                let v: Vec<f64> = list(key, value)?;
                self.split = v
                    .try_into()
                    .map_err(|_| bad(key, value, "expected three fractions"))?;
            }
            "sbm.block_sizes" => self.sbm.block_sizes = list(key, value)?,
            "sbm.p_within" => self.sbm.p_within = num(key, value)?,
            "sbm.p_between" => self.sbm.p_between = num(key, value)?,
            "sbm.feature_dim" => self.sbm.feature_dim = num(key, value)?,
            "sbm.label_signal" => self.sbm.label_signal = num(key, value)?,
            "sbm.group_signal" => self.sbm.group_signal = num(key, value)?,
            "sbm.noise" => self.sbm.noise = num(key, value)?,
            "sbm.sensitive_ratio" => self.sbm.sensitive_ratio = num(key, value)?,
            "sbm.include_sensitive" => self.sbm.include_sensitive = parse_switch(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sbm.validate()?;
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || self.split.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config(format!("split {:?} must be fractions summing to at most 1", self.split)));
        }
        if let Grouping::Kmeans { k_max } = self.grouping {
            if k_max < 2 {
                return Err(Error::Config("k_max must be at least 2".into()));
            }
        }
        Ok(())
    }

    /// Parses a whole file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, key, value) in entries(text)? {
            cfg.set(&key, &value)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file and applies [`SEED_ENV`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::parse(&std::fs::read_to_string(path)?)?;
        if let Some(seed) = seed_override()? {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

/// The value of [`SEED_ENV`], if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(num(SEED_ENV, v.trim())?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
    }
}
