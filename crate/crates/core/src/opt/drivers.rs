//! Optimization loops that evaluate through a [`WorkerPool`].

use super::cem::{cem_iterate, CemConfig, CemState, LinearPolicy};
use super::study::{Params, Study, Trial};
use super::tpe::{tpe_ask, SearchSpace, TpeConfig};
use crate::env::{Info, StepResult};
use crate::exec::{BatchOutcome, PoolError, WorkerPool};
use crate::lander::PriorSet;
use crate::rng::{derive_seed, rng_from_seed};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::io;
use std::time::Instant;
use thiserror::Error;

const ASK_STREAM: u64 = 0xA5C;
const EVAL_STREAM: u64 = 0xE7A1;
const IDLE_STREAM: u64 = 0x1D1E;
const MEMBER_STREAM: u64 = 0xCE5;
const EPISODE_STREAM: u64 = 0xE915;

#[derive(Debug, Error)]
pub enum OptError {
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("invalid driver config: {0}")]
    Config(String),
    #[error("writing results: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Tpe(TpeConfig),
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoConfig {
    pub sampler: Sampler,
    pub priors: PriorSet,
    pub n_trials: usize,
    /// Candidates evaluated per barrier wave, at most the pool size.
    pub batch: usize,
    pub seed: u64,
}

impl BoConfig {
    pub fn new(sampler: Sampler, n_trials: usize, batch: usize, seed: u64) -> Self {
        Self {
            sampler,
            priors: PriorSet::default(),
            n_trials,
            batch,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoOutcome {
    pub study: Study,
    pub best: Option<Trial>,
    /// `(seconds since pool ready, best value so far)` at each completion.
    pub curve: Vec<(f64, f64)>,
}

/// Maps one evaluated lander episode to an objective value.
fn trial_value(r: &StepResult) -> Result<f64, String> {
    if r.info.get("numerical_failure") == Some(&Value::Bool(true)) {
        return Err("numerical failure".into());
    }
    r.info
        .get("objective")
        .and_then(Value::as_f64)
        .ok_or_else(|| "touchdown did not complete".into())
}

fn design_options(p: &Params) -> Info {
    p.iter()
        .map(|(k, v)| (k.clone(), serde_json::Number::from_f64(*v).map_or(Value::Null, Value::Number)))
        .collect()
}

/// Ask/evaluate/tell in barrier waves of `batch` candidates until
/// `n_trials` more trials are recorded. Asks within a wave see the same
/// history (pending trials are ignored). Workers beyond the batch size run
/// a prior-sampled design that is discarded. After each wave `on_wave`
/// gets the wave's trials in number order and the new curve points in
/// completion order.
pub fn run_bo(
    pool: &mut WorkerPool,
    cfg: &BoConfig,
    mut study: Study,
    mut on_wave: impl FnMut(&[Trial], &[(f64, f64)]) -> io::Result<()>,
) -> Result<BoOutcome, OptError> {
    let w = pool.len();
    if cfg.batch == 0 || cfg.batch > w {
        return Err(OptError::Config(format!("batch must lie in 1..={w}, got {}", cfg.batch)));
    }
    if pool.config().env != "lander" {
        return Err(OptError::Config("BO needs a lander pool".into()));
    }
    if let Sampler::Tpe(t) = &cfg.sampler {
        t.validate().map_err(OptError::Config)?;
    }
    let space = SearchSpace::lander(&cfg.priors);
    let origin = pool.ready_at();
    let offset = study.trials().iter().map(|t| t.t_end).fold(0.0, f64::max);
    let clock = |at: Instant| offset + at.saturating_duration_since(origin).as_secs_f64();
    let mut curve = Vec::with_capacity(cfg.n_trials);
    let mut best = study.best_value();
    let target = study.len() + cfg.n_trials;
    let mut wave = 0u64;
    let act_dim = pool.spec().act_dim;

    while study.len() < target {
        let k = cfg.batch.min(target - study.len());
        let first = study.next_number();
        let asks: Vec<Params> = (0..k as u64)
            .map(|j| {
                let mut rng = rng_from_seed(derive_seed(derive_seed(cfg.seed, ASK_STREAM), first + j));
                match &cfg.sampler {
                    Sampler::Tpe(t) => tpe_ask(&study, &space, t, &mut rng),
                    Sampler::Random => space.sample_prior(&mut rng),
                }
            })
            .collect();
        let mut seeds = Vec::with_capacity(w);
        let mut options = Vec::with_capacity(w);
        for i in 0..w {
            if i < k {
                seeds.push(derive_seed(derive_seed(cfg.seed, EVAL_STREAM), first + i as u64));
                options.push(design_options(&asks[i]));
            } else {
                seeds.push(derive_seed(derive_seed(cfg.seed, IDLE_STREAM), wave * w as u64 + i as u64));
                options.push(Info::new());
            }
        }
        let t_start = clock(Instant::now());
        let mut outcomes: Vec<Result<f64, String>> = vec![Err("not evaluated".into()); w];
        let reset_ok: Vec<bool> = match pool.reset_all_with(&seeds, &options) {
            Ok(_) => vec![true; w],
            Err(PoolError::Batch(e)) => e.outcomes.iter().map(Result::is_ok).collect(),
            Err(e) => return Err(e.into()),
        };
        for (i, ok) in reset_ok.iter().enumerate() {
            if !ok {
                outcomes[i] = Err("reset failed".into());
            }
        }
        let actions = vec![vec![0.0; act_dim]; w];
        let mut t_end = vec![t_start; w];
        match pool.step_all(&actions) {
            Ok(b) => {
                for i in 0..w {
                    t_end[i] = clock(b.sent_at + b.reply_times[i]);
                    if reset_ok[i] {
                        outcomes[i] = trial_value(&b.results[i]);
                    }
                }
            }
            Err(PoolError::Batch(e)) => {
                let now = clock(Instant::now());
                for (i, o) in e.outcomes.iter().enumerate() {
                    t_end[i] = now;
                    outcomes[i] = match o {
                        Ok(BatchOutcome::Step(r)) if reset_ok[i] => trial_value(r),
                        Ok(_) => Err("reset failed".into()),
                        Err(f) => Err(f.to_string()),
                    };
                }
            }
            Err(e) => return Err(e.into()),
        }
        // numbers follow ask order whatever the completion order
        let told: Vec<Trial> = (0..k)
            .map(|j| study.tell(asks[j].clone(), outcomes[j].clone(), t_start, t_end[j]).clone())
            .collect();
        let mut order: Vec<&Trial> = told.iter().collect();
        order.sort_by(|a, b| a.t_end.total_cmp(&b.t_end).then(a.number.cmp(&b.number)));
        let fresh = curve.len();
        for t in order {
            if let Some(v) = t.value {
                best = Some(best.map_or(v, |b: f64| b.min(v)));
            }
            if let Some(b) = best {
                curve.push((t.t_end, b));
            }
        }
        on_wave(&told, &curve[fresh..])?;
        wave += 1;
    }
    Ok(BoOutcome {
        best: study.best().cloned(),
        study,
        curve,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemRunConfig {
    pub cem: CemConfig,
    pub iterations: u32,
    pub seed: u64,
}

/// One CEM iteration as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemRecord {
    pub iteration: u32,
    pub wall_clock_s: f64,
    pub mean_return: f64,
    pub mse_x: f64,
    pub mse_y: f64,
    pub best_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemOutcome {
    /// Highest-return member seen, or the initial mean without iterations.
    pub best: LinearPolicy,
    pub best_return: f64,
    pub state: CemState,
    pub curve: Vec<CemRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub ret: f64,
    /// Episode-averaged squared error of forward and lateral velocity.
    pub mse_x: f64,
    pub mse_y: f64,
    pub steps: u32,
}

fn tracking_errors(info: &Info) -> Option<(f64, f64)> {
    let vx = info.get("v_x")?.as_f64()?;
    let vy = info.get("v_y")?.as_f64()?;
    let cmd = info.get("command")?.as_array()?;
    let cx = cmd.first()?.as_f64()?;
    let cy = cmd.get(1)?.as_f64()?;
    Some(((vx - cx).powi(2), (vy - cy).powi(2)))
}

/// Runs one episode per policy in barrier waves of the pool size. Extra
/// workers in the last wave run the first policy and are ignored.
pub fn rollout_policies(
    pool: &mut WorkerPool,
    policies: &[LinearPolicy],
    seeds: &[u64],
    failure_return: f64,
) -> Result<Vec<EpisodeStats>, OptError> {
    assert_eq!(policies.len(), seeds.len());
    let w = pool.len();
    let mut out = Vec::with_capacity(policies.len());
    for (wave_pol, wave_seed) in policies.chunks(w).zip(seeds.chunks(w)) {
        let live = wave_pol.len();
        let pick = |i: usize| if i < live { i } else { 0 };
        let wave_seeds: Vec<u64> = (0..w).map(|i| wave_seed[pick(i)]).collect();
        let mut obs = pool.reset_all(&wave_seeds)?;
        let mut stats = vec![
            EpisodeStats {
                ret: 0.0,
                mse_x: 0.0,
                mse_y: 0.0,
                steps: 0,
            };
            w
        ];
        let mut done = vec![false; w];
        for d in done.iter_mut().skip(live) {
            *d = true;
        }
        while done.iter().any(|d| !d) {
            let actions = (0..w)
                .map(|i| wave_pol[pick(i)].act(&obs[i]))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| OptError::Config(e.to_string()))?;
            let results: Vec<Option<StepResult>> = match pool.step_all(&actions) {
                Ok(b) => b.results.into_iter().map(Some).collect(),
                Err(PoolError::Batch(e)) => e
                    .outcomes
                    .into_iter()
                    .map(|o| match o {
                        Ok(BatchOutcome::Step(r)) => Some(r),
                        _ => None,
                    })
                    .collect(),
                Err(e) => return Err(e.into()),
            };
            for (i, r) in results.into_iter().enumerate() {
                if done[i] {
                    if let Some(r) = r {
                        obs[i] = r.observation;
                    }
                    continue;
                }
                let s = &mut stats[i];
                match r {
                    None => {
                        s.ret = failure_return;
                        done[i] = true;
                    }
                    Some(r) => {
                        s.ret += r.reward;
                        s.steps += 1;
                        if let Some((ex, ey)) = tracking_errors(&r.info) {
                            s.mse_x += ex;
                            s.mse_y += ey;
                        }
                        done[i] = r.done();
                        obs[i] = r.observation;
                    }
                }
            }
        }
        for s in stats.iter_mut().take(live) {
            if s.steps > 0 {
                s.mse_x /= s.steps as f64;
                s.mse_y /= s.steps as f64;
            }
        }
        out.extend_from_slice(&stats[..live]);
    }
    Ok(out)
}

/// Cross-entropy search over linear tracker policies. Each iteration
/// samples the population, rolls out one episode per member, refits, and
/// logs a [`CemRecord`]. Member parameters depend only on the run seed and
/// iteration, never on the pool size.
pub fn run_cem(
    pool: &mut WorkerPool,
    cfg: &CemRunConfig,
    mut on_record: impl FnMut(&CemRecord) -> io::Result<()>,
) -> Result<CemOutcome, OptError> {
    cfg.cem.validate().map_err(OptError::Config)?;
    if pool.config().env != "tracker" {
        return Err(OptError::Config("CEM needs a tracker pool".into()));
    }
    let (obs_dim, act_dim) = (pool.spec().obs_dim, pool.spec().act_dim);
    let dim = LinearPolicy::n_params(obs_dim, act_dim);
    let mut state = CemState::new(dim, cfg.cem.init_std);
    let mut best = LinearPolicy::from_params(&state.mean, obs_dim, act_dim);
    let mut best_return = f64::NEG_INFINITY;
    let mut curve = Vec::with_capacity(cfg.iterations as usize);
    let origin = pool.ready_at();
    let p = cfg.cem.population;
    // Every member of every iteration sees the same episode. Single-episode
    // returns under independent commands rank members mostly by command luck.
    let episode_seed = derive_seed(cfg.seed, EPISODE_STREAM);
    for it in 0..cfg.iterations {
        let mut rng = rng_from_seed(derive_seed(derive_seed(cfg.seed, MEMBER_STREAM), it as u64));
        let members: Vec<Vec<f64>> = (0..p).map(|_| state.sample(&mut rng)).collect();
        let policies: Vec<LinearPolicy> = members
            .iter()
            .map(|m| LinearPolicy::from_params(m, obs_dim, act_dim))
            .collect();
        let seeds = vec![episode_seed; p];
        let stats = rollout_policies(pool, &policies, &seeds, cfg.cem.failure_return)?;
        let n = p as f64;
        let mean_return = stats.iter().map(|s| s.ret).sum::<f64>() / n;
        let mse_x = stats.iter().map(|s| s.mse_x).sum::<f64>() / n;
        let mse_y = stats.iter().map(|s| s.mse_y).sum::<f64>() / n;
        for (j, s) in stats.iter().enumerate() {
            if s.ret > best_return {
                best_return = s.ret;
                best = policies[j].clone();
            }
        }
        let population: Vec<(Vec<f64>, f64)> = members.into_iter().zip(stats.iter().map(|s| s.ret)).collect();
        state = cem_iterate(&state, &population, &cfg.cem);
        let rec = CemRecord {
            iteration: it,
            wall_clock_s: origin.elapsed().as_secs_f64(),
            mean_return,
            mse_x,
            mse_y,
            best_return,
        };
        on_record(&rec)?;
        curve.push(rec);
    }
    Ok(CemOutcome {
        best,
        best_return,
        state,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::PoolConfig;

    fn lander_pool(w: usize) -> WorkerPool {
        WorkerPool::spawn(PoolConfig::new("lander"), w).unwrap()
    }

    #[test]
    fn serial_bo_curve_is_nonincreasing_and_complete() {
        let mut pool = lander_pool(1);
        let cfg = BoConfig::new(Sampler::Tpe(TpeConfig::default()), 25, 1, 4);
        let mut seen = 0;
        let out = run_bo(&mut pool, &cfg, Study::new(), |t, _| {
            seen += t.len();
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 25);
        assert_eq!(out.study.len(), 25);
        assert_eq!(out.curve.len(), 25);
        assert!(out.curve.windows(2).all(|w| w[1].1 <= w[0].1 && w[1].0 >= w[0].0));
        assert_eq!(out.curve.last().unwrap().1, out.best.unwrap().value.unwrap());
    }

    #[test]
    fn batch_size_checked_against_pool() {
        let mut pool = lander_pool(2);
        let cfg = BoConfig::new(Sampler::Random, 4, 3, 0);
        assert!(matches!(run_bo(&mut pool, &cfg, Study::new(), |_, _| Ok(())), Err(OptError::Config(_))));
    }

    #[test]
    fn trial_multiset_independent_of_pool_size() {
        let cfg = BoConfig::new(Sampler::Tpe(TpeConfig::default()), 24, 4, 9);
        let mut a = lander_pool(4);
        let mut b = lander_pool(6);
        let ra = run_bo(&mut a, &cfg, Study::new(), |_, _| Ok(())).unwrap();
        let rb = run_bo(&mut b, &cfg, Study::new(), |_, _| Ok(())).unwrap();
        let strip = |s: &Study| s.trials().iter().map(Trial::without_times).collect::<Vec<_>>();
        assert_eq!(strip(&ra.study), strip(&rb.study));
    }

    #[test]
    fn resume_continues_numbering() {
        let mut pool = lander_pool(1);
        let cfg = BoConfig::new(Sampler::Random, 5, 1, 2);
        let first = run_bo(&mut pool, &cfg, Study::new(), |_, _| Ok(())).unwrap();
        let resumed = run_bo(&mut pool, &cfg, Study::replay(first.study.trials().to_vec()), |_, _| Ok(())).unwrap();
        let full = run_bo(&mut pool, &BoConfig { n_trials: 10, ..cfg }, Study::new(), |_, _| Ok(())).unwrap();
        let strip = |s: &Study| s.trials().iter().map(Trial::without_times).collect::<Vec<_>>();
        assert_eq!(strip(&resumed.study), strip(&full.study));
    }

    #[test]
    fn cem_zero_iterations_returns_initial_mean() {
        let mut pool = WorkerPool::spawn(PoolConfig::new("tracker"), 1).unwrap();
        let cfg = CemRunConfig {
            cem: CemConfig::default(),
            iterations: 0,
            seed: 1,
        };
        let out = run_cem(&mut pool, &cfg, |_| Ok(())).unwrap();
        assert!(out.curve.is_empty());
        assert_eq!(out.best, LinearPolicy::zeros(45, 12));
    }

    #[test]
    fn rollout_results_do_not_depend_on_wave_split() {
        let short = serde_json::json!({"horizon": 30});
        let cfg = PoolConfig::new("tracker").with_env_config(short);
        let mut rng = rng_from_seed(3);
        let state = CemState::new(552, 0.05);
        let policies: Vec<_> = (0..5).map(|_| LinearPolicy::from_params(&state.sample(&mut rng), 45, 12)).collect();
        let seeds: Vec<u64> = (10..15).collect();
        let mut one = WorkerPool::spawn(cfg.clone(), 1).unwrap();
        let mut three = WorkerPool::spawn(cfg, 3).unwrap();
        let a = rollout_policies(&mut one, &policies, &seeds, -100.0).unwrap();
        let b = rollout_policies(&mut three, &policies, &seeds, -100.0).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.steps >= 1 && s.steps <= 30));
    }
}
