//! Cross-entropy method over the parameters of a linear policy.

use crate::env::EnvError;
use crate::rng::SimRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// `tanh(W obs + b)`, `W` stored row-major as `act_dim x obs_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearPolicy {
    pub fn zeros(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            weights: vec![0.0; obs_dim * act_dim],
            bias: vec![0.0; act_dim],
        }
    }

    pub fn n_params(obs_dim: usize, act_dim: usize) -> usize {
        act_dim * (obs_dim + 1)
    }

    /// Weights first, then bias.
    pub fn from_params(params: &[f64], obs_dim: usize, act_dim: usize) -> Self {
        assert_eq!(params.len(), Self::n_params(obs_dim, act_dim));
        let (w, b) = params.split_at(obs_dim * act_dim);
        Self {
            obs_dim,
            act_dim,
            weights: w.to_vec(),
            bias: b.to_vec(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn act(&self, obs: &[f64]) -> Result<Vec<f64>, EnvError> {
        if obs.len() != self.obs_dim {
            return Err(EnvError::ActionShape {
                expected: self.obs_dim,
                got: obs.len(),
            });
        }
        Ok(self
            .weights
            .chunks_exact(self.obs_dim)
            .zip(&self.bias)
            .map(|(row, b)| (row.iter().zip(obs).map(|(w, o)| w * o).sum::<f64>() + b).tanh())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub population: usize,
    pub elite_frac: f64,
    pub init_std: f64,
    /// Weight of the elite spread in the new stddev.
    pub smoothing: f64,
    pub sigma_min: f64,
    /// Return credited to an episode whose worker failed.
    pub failure_return: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            population: 32,
            elite_frac: 0.125,
            init_std: 0.1,
            smoothing: 0.7,
            sigma_min: 0.01,
            failure_return: crate::env::DEFAULT_REWARD_FLOOR,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.population < 2 {
            return Err("population must be >= 2".into());
        }
        if !(self.elite_frac > 0.0 && self.elite_frac <= 1.0) {
            return Err("elite_frac must lie in (0, 1]".into());
        }
        if !(self.init_std > 0.0 && self.sigma_min > 0.0) {
            return Err("init_std and sigma_min must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return Err("smoothing must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn n_elite(&self, population: usize) -> usize {
        ((self.elite_frac * population as f64).ceil() as usize).clamp(1, population)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemState {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
    pub iteration: u32,
}

impl CemState {
    pub fn new(dim: usize, init_std: f64) -> Self {
        Self {
            mean: vec![0.0; dim],
            stddev: vec![init_std; dim],
            iteration: 0,
        }
    }

    /// `mean + stddev * z`, coordinates drawn in order.
    pub fn sample(&self, rng: &mut SimRng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.stddev)
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * z
            })
            .collect()
    }
}

/// Refits the sampling distribution to the best `ceil(elite_frac * P)`
/// members. Equal returns keep population order.
pub fn cem_iterate(state: &CemState, population: &[(Vec<f64>, f64)], cfg: &CemConfig) -> CemState {
    assert!(population.len() >= 2, "population must have at least 2 members");
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| population[b].1.total_cmp(&population[a].1));
    let elites = &order[..cfg.n_elite(population.len())];
    let k = elites.len() as f64;
    let dim = state.mean.len();
    let mut mean = vec![0.0; dim];
    for &e in elites {
        for (m, x) in mean.iter_mut().zip(&population[e].0) {
            *m += x / k;
        }
    }
    let mut var = vec![0.0; dim];
    for &e in elites {
        for ((v, x), m) in var.iter_mut().zip(&population[e].0).zip(&mean) {
            *v += (x - m) * (x - m) / k;
        }
    }
    let stddev = var
        .iter()
        .zip(&state.stddev)
        .map(|(v, old)| (cfg.smoothing * v.sqrt() + (1.0 - cfg.smoothing) * old).max(cfg.sigma_min))
        .collect();
    CemState {
        mean,
        stddev,
        iteration: state.iteration + 1,
    }
}
