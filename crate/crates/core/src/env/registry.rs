//! Name-based construction of the built-in environments.

use super::{EnvError, Environment, Episode, EpisodeClock, Info, ScenarioSpec, StepResult};
use crate::lander::{LanderConfig, LanderEnv};
use crate::tracker::{TrackerConfig, TrackerEnv};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::time::{Duration, Instant};

pub const ENV_NAMES: [&str; 2] = ["lander", "tracker"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    #[default]
    None,
    /// Busy-waits, occupying a core like extra physics work would.
    Spin,
    /// Sleeps, standing in for cost spent off the host CPU.
    Sleep,
}

/// Artificial extra cost added to every decision step. Never changes results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepPadding {
    pub mode: PaddingMode,
    pub micros: u64,
}

impl StepPadding {
    pub fn spin(micros: u64) -> Self {
        Self { mode: PaddingMode::Spin, micros }
    }

    pub fn sleep(micros: u64) -> Self {
        Self { mode: PaddingMode::Sleep, micros }
    }

    pub fn is_none(&self) -> bool {
        self.mode == PaddingMode::None || self.micros == 0
    }

    pub fn apply(&self) {
        let d = Duration::from_micros(self.micros);
        match self.mode {
            _ if self.micros == 0 => {}
            PaddingMode::None => {}
            PaddingMode::Sleep => std::thread::sleep(d),
            PaddingMode::Spin => {
                let start = Instant::now();
                while start.elapsed() < d {
                    std::hint::spin_loop();
                }
            }
        }
    }
}

struct Padded {
    inner: Box<dyn Environment>,
    padding: StepPadding,
}

impl Environment for Padded {
    fn spec(&self) -> &ScenarioSpec {
        self.inner.spec()
    }

    fn reset(&mut self, seed: u64, options: &Info) -> Result<Vec<f64>, EnvError> {
        self.inner.reset(seed, options)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        let r = self.inner.step(action);
        self.padding.apply();
        r
    }

    fn clock(&self) -> EpisodeClock {
        self.inner.clock()
    }

    fn is_active(&self) -> bool {
        self.inner.is_active()
    }
}

fn parse<T: for<'de> Deserialize<'de> + Default>(config: &Value) -> Result<T, EnvError> {
    match config {
        Value::Null => Ok(T::default()),
        v => serde_json::from_value(v.clone()).map_err(|e| EnvError::Config(e.to_string())),
    }
}

/// Builds environment `name` from its JSON config section (`null` for
/// defaults).
pub fn make_env(
    name: &str,
    config: &Value,
    padding: StepPadding,
) -> Result<Box<dyn Environment>, EnvError> {
    let env: Box<dyn Environment> = match name {
        "lander" => {
            let cfg: LanderConfig = parse(config)?;
            let floor = cfg.reward_floor;
            Box::new(Episode::with_reward_floor(LanderEnv::new(cfg)?, floor))
        }
        "tracker" => {
            let cfg: TrackerConfig = parse(config)?;
            let floor = cfg.reward_floor;
            Box::new(Episode::with_reward_floor(TrackerEnv::new(cfg)?, floor))
        }
        other => return Err(EnvError::UnknownEnv(other.to_string())),
    };
    if padding.is_none() {
        Ok(env)
    } else {
        Ok(Box::new(Padded { inner: env, padding }))
    }
}
