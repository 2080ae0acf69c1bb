//! Run configuration: a strict JSON document, defaults filled on parse.

use rollout_grid::env::{PaddingMode, StepPadding, ENV_NAMES};
use rollout_grid::lander::LanderConfig;
use rollout_grid::opt::{CemConfig, TpeConfig};
use rollout_grid::tracker::TrackerConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Throughput,
    Bo,
    Cem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    InProcess,
    /// One child process per worker over loopback TCP.
    Socket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Tpe,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThroughputSection {
    /// Decision steps per environment.
    pub steps: u64,
    /// Pool sizes to measure; empty means just `n_env`.
    pub sweep: Vec<usize>,
    pub repeats: u32,
}

impl Default for ThroughputSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            sweep: Vec::new(),
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoSection {
    pub sampler: SamplerKind,
    pub n_trials: usize,
    /// Candidates per wave; defaults to `n_env`.
    pub batch: Option<usize>,
    pub tpe: TpeConfig,
}

impl Default for BoSection {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Tpe,
            n_trials: 60,
            batch: None,
            tpe: TpeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemSection {
    pub iterations: u32,
    pub population: usize,
    pub elite_frac: f64,
    pub init_std: f64,
    pub smoothing: f64,
    pub sigma_min: f64,
    pub failure_return: f64,
}

impl Default for CemSection {
    fn default() -> Self {
        let c = CemConfig::default();
        Self {
            iterations: 30,
            population: c.population,
            elite_frac: c.elite_frac,
            init_std: c.init_std,
            smoothing: c.smoothing,
            sigma_min: c.sigma_min,
            failure_return: c.failure_return,
        }
    }
}

impl CemSection {
    pub fn cem_config(&self) -> CemConfig {
        CemConfig {
            population: self.population,
            elite_frac: self.elite_frac,
            init_std: self.init_std,
            smoothing: self.smoothing,
            sigma_min: self.sigma_min,
            failure_return: self.failure_return,
        }
    }
}

fn default_one() -> u32 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub env: String,
    pub n_env: usize,
    #[serde(default = "default_one")]
    pub n_s: u32,
    pub seed: u64,
    #[serde(default = "default_transport")]
    pub transport: TransportKind,
    /// Environment configuration; replaced by the fully defaulted form.
    #[serde(default)]
    pub env_config: Value,
    #[serde(default)]
    pub padding: StepPadding,
    #[serde(default)]
    pub throughput: ThroughputSection,
    #[serde(default)]
    pub bo: BoSection,
    #[serde(default)]
    pub cem: CemSection,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

fn default_transport() -> TransportKind {
    TransportKind::InProcess
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid `{field}`: {constraint}")]
    Validation { field: String, constraint: String },
}

fn invalid(field: &str, constraint: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        field: field.into(),
        constraint: constraint.into(),
    }
}

/// Appends a "did you mean" hint to serde's unknown-field message.
fn suggest(message: &str) -> String {
    let Some(rest) = message.strip_prefix("unknown field `") else {
        return message.to_string();
    };
    let Some((bad, tail)) = rest.split_once('`') else {
        return message.to_string();
    };
    let best = tail
        .split('`')
        .skip(1)
        .step_by(2)
        .map(|cand| (strsim::jaro_winkler(bad, cand), cand))
        .filter(|(score, _)| *score > 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((_, cand)) => format!("{message}; did you mean `{cand}`?"),
        None => message.to_string(),
    }
}

fn parse_error(e: serde_json::Error) -> ConfigError {
    let full = e.to_string();
    // serde_json appends " at line L column C"; keep only the message
    let message = full.rsplit_once(" at line ").map_or(full.as_str(), |(m, _)| m);
    ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: suggest(message),
    }
}

/// Parses and validates a run configuration. `env_config` comes back with
/// every default filled in.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg: RunConfig = serde_json::from_str(text).map_err(parse_error)?;
    cfg.normalize()?;
    Ok(cfg)
}

impl RunConfig {
    /// Validates and fills `env_config` defaults. Idempotent.
    pub fn normalize(&mut self) -> Result<(), ConfigError> {
        if !ENV_NAMES.contains(&self.env.as_str()) {
            return Err(invalid("env", format!("one of {ENV_NAMES:?}")));
        }
        if self.n_env < 1 {
            return Err(invalid("n_env", "n_env ≥ 1"));
        }
        if self.n_s < 1 {
            return Err(invalid("n_s", "n_s ≥ 1"));
        }
        let env_cfg = |e: String| invalid("env_config", e);
        let src = if self.env_config.is_null() {
            Value::Object(Default::default())
        } else {
            self.env_config.clone()
        };
        self.env_config = match self.env.as_str() {
            "lander" => {
                let c: LanderConfig = serde_json::from_value(src).map_err(|e| env_cfg(e.to_string()))?;
                serde_json::to_value(c).expect("serializable")
            }
            _ => {
                let c: TrackerConfig = serde_json::from_value(src).map_err(|e| env_cfg(e.to_string()))?;
                c.validate().map_err(|e| env_cfg(e.to_string()))?;
                serde_json::to_value(c).expect("serializable")
            }
        };
        if self.padding.mode != PaddingMode::None && self.padding.micros == 0 {
            return Err(invalid("padding.micros", "must be > 0 when padding is enabled"));
        }
        match self.mode {
            Mode::Throughput => {
                let t = &self.throughput;
                if t.steps < 1 {
                    return Err(invalid("throughput.steps", "steps ≥ 1"));
                }
                if t.repeats < 1 {
                    return Err(invalid("throughput.repeats", "repeats ≥ 1"));
                }
                if t.sweep.contains(&0) {
                    return Err(invalid("throughput.sweep", "every entry ≥ 1"));
                }
            }
            Mode::Bo => {
                if self.env != "lander" {
                    return Err(invalid("env", "bo mode needs env = \"lander\""));
                }
                let b = &self.bo;
                if b.n_trials < 1 {
                    return Err(invalid("bo.n_trials", "n_trials ≥ 1"));
                }
                if let Some(batch) = b.batch {
                    if batch < 1 || batch > self.n_env {
                        return Err(invalid("bo.batch", format!("1 ≤ batch ≤ n_env ({})", self.n_env)));
                    }
                }
                b.tpe.validate().map_err(|e| invalid("bo.tpe", e))?;
            }
            Mode::Cem => {
                if self.env != "tracker" {
                    return Err(invalid("env", "cem mode needs env = \"tracker\""));
                }
                self.cem.cem_config().validate().map_err(|e| invalid("cem", e))?;
            }
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.bo.batch.unwrap_or(self.n_env)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("serializable")
    }
}
