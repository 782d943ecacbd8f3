//! `key = value` configuration files with `#` comments.

use crate::data::SyntheticSpec;
use crate::trainer::TrainConfig;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, line: usize, reason: String },
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: `{key}` given twice")]
    Duplicate { key: String, line: usize },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

impl ConfigError {
    /// The key the error refers to, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            Self::UnknownKey { key, .. } | Self::InvalidValue { key, .. } | Self::Duplicate { key, .. } => Some(key),
            _ => None,
        }
    }
}

struct Entry {
    line: usize,
    key: String,
    value: String,
}

fn entries(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| ConfigError::Syntax { line, text: raw.to_string() })?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line, text: raw.to_string() });
        }
        if out.iter().any(|e| e.key == key) {
            return Err(ConfigError::Duplicate { key, line });
        }
        out.push(Entry { line, key, value: v.trim().to_string() });
    }
    Ok(out)
}

fn parse<T: FromStr>(e: &Entry) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    e.value.parse().map_err(|err: T::Err| ConfigError::InvalidValue {
        key: e.key.clone(),
        line: e.line,
        reason: format!("{err} ({:?})", e.value),
    })
}

fn parse_list<T: FromStr>(e: &Entry) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    e.value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|err: T::Err| ConfigError::InvalidValue {
                key: e.key.clone(),
                line: e.line,
                reason: format!("{err} ({s:?})"),
            })
        })
        .collect()
}

fn invalid(e: &Entry, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue { key: e.key.clone(), line: e.line, reason: reason.into() }
}

fn positive(e: &Entry) -> Result<f64, ConfigError> {
    let v: f64 = parse(e)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(e, format!("must be positive, got {v}")))
    }
}

fn unit_interval(e: &Entry) -> Result<f64, ConfigError> {
    let v: f64 = parse(e)?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(invalid(e, format!("must lie in [0, 1), got {v}")))
    }
}

fn nonneg(e: &Entry) -> Result<f64, ConfigError> {
    let v: f64 = parse(e)?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(e, format!("must be non-negative, got {v}")))
    }
}

fn count(e: &Entry) -> Result<usize, ConfigError> {
    let v: usize = parse(e)?;
    if v > 0 {
        Ok(v)
    } else {
        Err(invalid(e, "must be positive"))
    }
}

/// Parse a training configuration; absent keys keep their defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig, ConfigError> {
    let mut c = TrainConfig::default();
    let mut last_line = 0;
    for e in entries(text)? {
        last_line = e.line;
        match e.key.as_str() {
            "n_clusters" => c.n_clusters = parse(&e)?,
            "hidden" => c.hidden = parse_list(&e)?,
            "embed_dim" => c.embed_dim = count(&e)?,
            "tau" => c.tau = positive(&e)?,
            "kappa" => c.kappa = positive(&e)?,
            "queue_size" => c.queue_size = count(&e)?,
            "ema_momentum" => c.ema_momentum = unit_interval(&e)?,
            "batch_size" => c.batch_size = count(&e)?,
            "epochs" => c.epochs = parse(&e)?,
            "lr_initial" => c.lr_initial = positive(&e)?,
            "lr_milestones" => c.lr_milestones = parse_list(&e)?,
            "lr_decay" => c.lr_decay = positive(&e)?,
            "sgd_momentum" => c.sgd_momentum = unit_interval(&e)?,
            "weight_decay" => c.weight_decay = nonneg(&e)?,
            "seed" => c.seed = parse(&e)?,
            "uniform_gating" => c.uniform_gating = parse(&e)?,
            "single_head" => c.single_head = parse(&e)?,
            "no_class_term" => c.no_class_term = parse(&e)?,
            "detach_posterior" => c.detach_posterior = parse(&e)?,
            "zhat_positive" => c.zhat_positive = parse(&e)?,
            "aug_noise" => c.aug_noise = nonneg(&e)?,
            "aug_dropout" => c.aug_dropout = unit_interval(&e)?,
            "kmeans_restarts" => c.kmeans_restarts = count(&e)?,
            _ => return Err(ConfigError::UnknownKey { key: e.key, line: e.line }),
        }
    }
    // Cross-field constraints are reported against a synthetic key.
    c.validate().map_err(|err| ConfigError::InvalidValue {
        key: "config".into(),
        line: last_line,
        reason: err.to_string(),
    })?;
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<TrainConfig, ConfigError> {
    parse_config(&read(path)?)
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn join<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

/// Render a configuration so that `parse_config` reproduces it exactly.
pub fn render_config(c: &TrainConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("n_clusters", c.n_clusters.to_string());
    kv("hidden", join(&c.hidden));
    kv("embed_dim", c.embed_dim.to_string());
    kv("tau", format!("{:?}", c.tau));
    kv("kappa", format!("{:?}", c.kappa));
    kv("queue_size", c.queue_size.to_string());
    kv("ema_momentum", format!("{:?}", c.ema_momentum));
    kv("batch_size", c.batch_size.to_string());
    kv("epochs", c.epochs.to_string());
    kv("lr_initial", format!("{:?}", c.lr_initial));
    kv("lr_milestones", join(&c.lr_milestones));
    kv("lr_decay", format!("{:?}", c.lr_decay));
    kv("sgd_momentum", format!("{:?}", c.sgd_momentum));
    kv("weight_decay", format!("{:?}", c.weight_decay));
    kv("seed", c.seed.to_string());
    kv("uniform_gating", c.uniform_gating.to_string());
    kv("single_head", c.single_head.to_string());
    kv("no_class_term", c.no_class_term.to_string());
    kv("detach_posterior", c.detach_posterior.to_string());
    kv("zhat_positive", c.zhat_positive.to_string());
    kv("aug_noise", format!("{:?}", c.aug_noise));
    kv("aug_dropout", format!("{:?}", c.aug_dropout));
    kv("kmeans_restarts", c.kmeans_restarts.to_string());
    s
}

pub fn parse_synthetic_spec(text: &str) -> Result<SyntheticSpec, ConfigError> {
    let mut s = SyntheticSpec::default();
    for e in entries(text)? {
        match e.key.as_str() {
            "n_clusters" => s.n_clusters = count(&e)?,
            "d_input" => s.d_input = count(&e)?,
            "n_per_cluster" => s.n_per_cluster = count(&e)?,
            "concentration" => {
                let v: f64 = parse(&e)?;
                if !(v > 0.0) {
                    return Err(invalid(&e, format!("must be positive, got {v}")));
                }
                s.concentration = v;
            }
            "seed" => s.seed = parse(&e)?,
            _ => return Err(ConfigError::UnknownKey { key: e.key, line: e.line }),
        }
    }
    Ok(s)
}

pub fn load_synthetic_spec(path: &Path) -> Result<SyntheticSpec, ConfigError> {
    parse_synthetic_spec(&read(path)?)
}
