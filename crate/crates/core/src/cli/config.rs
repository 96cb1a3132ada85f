//! Experiment config files: `key = value` lines, `#` comments.
//!
//! Input paths resolve against the config file's directory; checkpoint,
//! mapping and metrics paths resolve against the run's output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::dataio::SynthParams;
use crate::pipeline::{CropMode, FeatureTag, GeneralistConfig, Method};
use crate::specialty::{DEFAULT_LAMBDA, DEFAULT_MAX_SWEEPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value', found '{text}'")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key '{key}' given twice")]
    Duplicate { line: usize, key: String },
    #[error("key '{key}': bad value '{value}': {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("key '{key}' is required {reason}")]
    Missing { key: String, reason: String },
}

const KEYS: &[&str] = &[
    "data",
    "data.path",
    "data.classes",
    "data.train",
    "data.test",
    "synth.classes",
    "synth.superclusters",
    "synth.per_class",
    "synth.test_per_class",
    "synth.image_size",
    "synth.channels",
    "synth.separation",
    "synth.perturbation",
    "synth.noise",
    "synth.seed",
    "netspec.base",
    "netspec.branch",
    "k",
    "method",
    "lambda",
    "subset_size",
    "update_period",
    "updates_until_epoch",
    "max_sweeps",
    "confusion",
    "seed",
    "deterministic",
    "eval.crop",
    "checkpoint.generalist",
    "checkpoint.flat",
    "checkpoint.nofe_init",
    "checkpoint.nofe",
    "mapping",
    "metrics",
    "retrieve.tag",
    "retrieve.k",
    "retrieve.queries",
];

/// Where a netspec's text comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum SpecSource {
    /// A bundled architecture, written `shipped:<name>`.
    Shipped(String),
    File(PathBuf),
}

impl SpecSource {
    /// `shipped:<name>` or a path relative to `dir`.
    pub fn parse(text: &str, dir: &Path) -> Self {
        match text.strip_prefix("shipped:") {
            Some(name) => SpecSource::Shipped(name.to_string()),
            None => SpecSource::File(dir.join(text)),
        }
    }
}

impl std::fmt::Display for SpecSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpecSource::Shipped(name) => write!(f, "shipped:{name}"),
            SpecSource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Planted-hierarchy data; `seed` falls back to the master seed.
    Synthetic { params: SynthParams, seed: Option<u64> },
    /// A directory holding CIFAR-100 `train.bin` and `test.bin`, optionally
    /// cut to the first `classes` classes.
    Cifar100 { dir: PathBuf, classes: Option<usize> },
    /// Dataset containers written by the `synth` command.
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub base: SpecSource,
    pub branch: Option<SpecSource>,
    pub k: usize,
    pub method: Method,
    pub lambda: f64,
    pub subset_size: Option<usize>,
    pub update_period: f64,
    pub updates_until_epoch: Option<usize>,
    pub max_sweeps: usize,
    /// C x C confusion CSV for spectral-fixed.
    pub confusion: Option<PathBuf>,
    pub seed: u64,
    pub deterministic: bool,
    pub crop: CropMode,
    pub generalist_checkpoint: PathBuf,
    pub flat_checkpoint: PathBuf,
    pub nofe_init_checkpoint: PathBuf,
    pub nofe_checkpoint: PathBuf,
    pub mapping: PathBuf,
    pub metrics: PathBuf,
    pub retrieve_tag: FeatureTag,
    pub retrieve_k: usize,
    pub retrieve_queries: usize,
}

struct Raw {
    values: BTreeMap<String, String>,
}

impl Raw {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: line_no,
                text: content.to_string(),
            })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line: line_no,
                    key: key.to_string(),
                });
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate {
                    line: line_no,
                    key: key.to_string(),
                });
            }
        }
        Ok(Self { values })
    }

    fn str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.str(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::BadValue {
                    key: key.to_string(),
                    value: v.to_string(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn required(&self, key: &str, reason: &str) -> Result<&str, ConfigError> {
        self.str(key).ok_or_else(|| ConfigError::Missing {
            key: key.to_string(),
            reason: reason.to_string(),
        })
    }
}

fn bad(key: &str, value: impl ToString, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    /// Parses config text; `dir` anchors relative input paths.
    pub fn parse(text: &str, dir: &Path) -> Result<Self, ConfigError> {
        let raw = Raw::parse(text)?;
        let data = match raw.str("data").unwrap_or("synthetic") {
            "synthetic" => {
                let d = SynthParams::default();
                let params = SynthParams {
                    classes: raw.or("synth.classes", d.classes)?,
                    superclusters: raw.or("synth.superclusters", d.superclusters)?,
                    per_class: raw.or("synth.per_class", d.per_class)?,
                    test_per_class: raw.or("synth.test_per_class", raw.or("synth.per_class", d.test_per_class)?)?,
                    image_size: raw.or("synth.image_size", d.image_size)?,
                    channels: raw.or("synth.channels", d.channels)?,
                    separation: raw.or("synth.separation", d.separation)?,
                    perturbation: raw.or("synth.perturbation", d.perturbation)?,
                    noise: raw.or("synth.noise", d.noise)?,
                    ..d
                };
                DataSource::Synthetic {
                    params,
                    seed: raw.get("synth.seed")?,
                }
            }
            "cifar100" => DataSource::Cifar100 {
                dir: dir.join(raw.required("data.path", "when data = cifar100")?),
                classes: raw.get("data.classes")?,
            },
            "files" => DataSource::Files {
                train: dir.join(raw.required("data.train", "when data = files")?),
                test: dir.join(raw.required("data.test", "when data = files")?),
            },
            other => return Err(bad("data", other, "expected synthetic, cifar100 or files")),
        };
        let base = SpecSource::parse(raw.required("netspec.base", "")?, dir);
        let branch = raw.str("netspec.branch").map(|t| SpecSource::parse(t, dir));
        let update_period: f64 = raw.or("update_period", 1.0)?;
        if !(update_period.is_finite() && update_period > 0.0) {
            return Err(bad("update_period", update_period, "must be positive"));
        }
        let path = |key: &str, default: &str| -> PathBuf { PathBuf::from(raw.str(key).unwrap_or(default)) };
        let cfg = Self {
            data,
            base,
            branch,
            k: raw.or("k", 2)?,
            method: raw.or("method", Method::FullyBalanced)?,
            lambda: raw.or("lambda", DEFAULT_LAMBDA)?,
            subset_size: raw.get("subset_size")?,
            update_period,
            updates_until_epoch: raw.get("updates_until_epoch")?,
            max_sweeps: raw.or("max_sweeps", DEFAULT_MAX_SWEEPS)?,
            confusion: raw.str("confusion").map(|p| dir.join(p)),
            seed: raw.or("seed", 0)?,
            deterministic: raw.or("deterministic", false)?,
            crop: raw.or("eval.crop", CropMode::Center)?,
            generalist_checkpoint: path("checkpoint.generalist", "generalist.ckpt"),
            flat_checkpoint: path("checkpoint.flat", "flat.ckpt"),
            nofe_init_checkpoint: path("checkpoint.nofe_init", "nofe-init.ckpt"),
            nofe_checkpoint: path("checkpoint.nofe", "nofe.ckpt"),
            mapping: path("mapping", "mapping.csv"),
            metrics: path("metrics", "metrics.jsonl"),
            retrieve_tag: raw.or("retrieve.tag", FeatureTag::BranchFc)?,
            retrieve_k: raw.or("retrieve.k", 5)?,
            retrieve_queries: raw.or("retrieve.queries", 20)?,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, super::CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            super::CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Ok(Self::parse(&text, dir)?)
    }

    fn check(&self) -> Result<(), ConfigError> {
        if self.k == 0 {
            return Err(bad("k", self.k, "must be at least 1"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(bad("lambda", self.lambda, "must be a non-negative number"));
        }
        if self.retrieve_k == 0 {
            return Err(bad("retrieve.k", 0, "must be at least 1"));
        }
        Ok(())
    }

    /// Applies command-line overrides, re-checking what they touch.
    pub fn override_with(
        &mut self,
        seed: Option<u64>,
        deterministic: bool,
        k: Option<usize>,
        lambda: Option<f64>,
        method: Option<Method>,
    ) -> Result<(), ConfigError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.deterministic |= deterministic;
        if let Some(k) = k {
            self.k = k;
        }
        if let Some(l) = lambda {
            self.lambda = l;
        }
        if let Some(m) = method {
            self.method = m;
        }
        self.check()
    }

    pub fn generalist_config(&self) -> GeneralistConfig {
        GeneralistConfig {
            lambda: self.lambda,
            subset_size: self.subset_size,
            update_period: self.update_period,
            updates_until_epoch: self.updates_until_epoch,
            max_sweeps: self.max_sweeps,
            deterministic: self.deterministic,
            ..GeneralistConfig::new(self.k, self.method)
        }
    }

    /// Resolved settings, for the run manifest.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        match &self.data {
            DataSource::Synthetic { params: p, seed } => {
                put("data", "synthetic".into());
                put("synth.classes", p.classes.to_string());
                put("synth.superclusters", p.superclusters.to_string());
                put("synth.per_class", p.per_class.to_string());
                put("synth.test_per_class", p.test_per_class.to_string());
                put("synth.image_size", p.image_size.to_string());
                put("synth.channels", p.channels.to_string());
                put("synth.separation", p.separation.to_string());
                put("synth.perturbation", p.perturbation.to_string());
                put("synth.noise", p.noise.to_string());
                put("synth.seed", seed.unwrap_or(self.seed).to_string());
            }
            DataSource::Cifar100 { dir, classes } => {
                put("data", "cifar100".into());
                put("data.path", dir.display().to_string());
                if let Some(c) = classes {
                    put("data.classes", c.to_string());
                }
            }
            DataSource::Files { train, test } => {
                put("data", "files".into());
                put("data.train", train.display().to_string());
                put("data.test", test.display().to_string());
            }
        }
        put("netspec.base", self.base.to_string());
        if let Some(b) = &self.branch {
            put("netspec.branch", b.to_string());
        }
        put("k", self.k.to_string());
        put("method", self.method.to_string());
        put("lambda", self.lambda.to_string());
        if let Some(s) = self.subset_size {
            put("subset_size", s.to_string());
        }
        put("update_period", self.update_period.to_string());
        if let Some(u) = self.updates_until_epoch {
            put("updates_until_epoch", u.to_string());
        }
        put("max_sweeps", self.max_sweeps.to_string());
        if let Some(c) = &self.confusion {
            put("confusion", c.display().to_string());
        }
        put("seed", self.seed.to_string());
        put("deterministic", self.deterministic.to_string());
        put("eval.crop", self.crop.to_string());
        put("checkpoint.generalist", self.generalist_checkpoint.display().to_string());
        put("checkpoint.flat", self.flat_checkpoint.display().to_string());
        put("checkpoint.nofe_init", self.nofe_init_checkpoint.display().to_string());
        put("checkpoint.nofe", self.nofe_checkpoint.display().to_string());
        put("mapping", self.mapping.display().to_string());
        put("metrics", self.metrics.display().to_string());
        put("retrieve.tag", self.retrieve_tag.to_string());
        put("retrieve.k", self.retrieve_k.to_string());
        put("retrieve.queries", self.retrieve_queries.to_string());
        m
    }
}
