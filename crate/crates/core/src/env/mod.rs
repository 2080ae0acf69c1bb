//! Stepped-scenario abstraction and the decision-step contract.
//!
//! A concrete simulation is expressed as a [`Scenario`]: a set of hooks
//! (reset, apply-action, advance, observe, reward, termination) plus the
//! timing parameters in [`ScenarioSpec`]. [`Episode`] drives those hooks
//! with the fixed per-step order
//!
//! ```text
//! validate(a) -> apply_action(a) -> advance_one(dt) x k -> observe -> reward -> status
//! ```
//!
//! and owns the episode clock and the termination/truncation bookkeeping.
//! Auto-reset is deliberately absent here; the execution layer handles it.

mod registry;

pub use registry::{make_env, PaddingMode, StepPadding, ENV_NAMES};

use crate::rng::{rng_from_seed, SimRng};
use serde_json::Value;
use thiserror::Error;

/// Auxiliary key -> value diagnostics. Backed by a sorted map, so its JSON
/// encoding is canonical.
pub type Info = serde_json::Map<String, Value>;

/// Default reward assigned when the state becomes non-finite mid-episode.
pub const DEFAULT_REWARD_FLOOR: f64 = -100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid scenario spec: {0}")]
    InvalidSpec(String),
    #[error("reset failed: {0}")]
    Reset(String),
    #[error("non-finite value in {0}")]
    Numerical(String),
    #[error("action has length {got}, expected {expected}")]
    ActionShape { expected: usize, got: usize },
    #[error("action entry {index} is not finite")]
    ActionValue { index: usize },
    #[error("advanceable {index} failed: {cause}")]
    Advance { index: usize, cause: String },
    #[error("step called on an episode that is not active")]
    EpisodeOver,
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
    #[error("invalid environment config: {0}")]
    Config(String),
}

impl EnvError {
    /// Numeric code carried in wire `ERR` replies.
    pub fn code(&self) -> u32 {
        match self {
            EnvError::InvalidSpec(_) => 10,
            EnvError::Reset(_) => 11,
            EnvError::Numerical(_) => 12,
            EnvError::ActionShape { .. } => 13,
            EnvError::ActionValue { .. } => 14,
            EnvError::Advance { .. } => 15,
            EnvError::EpisodeOver => 16,
            EnvError::UnknownEnv(_) => 17,
            EnvError::Config(_) => 18,
        }
    }
}

/// Timing and shape parameters of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    /// Physics tick size in seconds.
    pub sim_step_size: f64,
    /// Physics ticks per decision step.
    pub steps_per_action: u32,
    /// Decision steps before truncation.
    pub horizon: u32,
    pub obs_dim: usize,
    pub act_dim: usize,
}

impl ScenarioSpec {
    pub fn new(
        sim_step_size: f64,
        steps_per_action: u32,
        horizon: u32,
        obs_dim: usize,
        act_dim: usize,
    ) -> Result<Self, EnvError> {
        if !(sim_step_size > 0.0 && sim_step_size.is_finite()) {
            return Err(EnvError::InvalidSpec(format!(
                "sim_step_size must be > 0, got {sim_step_size}"
            )));
        }
        if steps_per_action == 0 {
            return Err(EnvError::InvalidSpec("steps_per_action must be >= 1".into()));
        }
        if horizon == 0 {
            return Err(EnvError::InvalidSpec("horizon must be >= 1".into()));
        }
        if obs_dim == 0 || act_dim == 0 {
            return Err(EnvError::InvalidSpec("obs_dim and act_dim must be >= 1".into()));
        }
        Ok(Self {
            sim_step_size,
            steps_per_action,
            horizon,
            obs_dim,
            act_dim,
        })
    }

    /// Simulated seconds per decision step, `k * dt`.
    pub fn decision_dt(&self) -> f64 {
        self.steps_per_action as f64 * self.sim_step_size
    }
}

/// Output of one decision step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: Info,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeClock {
    pub decision_step: u32,
    pub steps_per_action: u32,
    pub sim_step_size: f64,
}

impl EpisodeClock {
    /// `t * k * dt`, computed as a product so it never accumulates drift.
    pub fn sim_time(&self) -> f64 {
        self.decision_step as f64 * self.steps_per_action as f64 * self.sim_step_size
    }
}

/// Failure reported by a single advanceable object.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{0}")]
pub struct AdvanceFault(pub String);

/// Anything that is stepped once per physics tick.
pub trait Advanceable {
    fn advance(&mut self, dt: f64) -> Result<(), AdvanceFault>;
}

/// Steps every element once by `dt`, in slice order. The first failure
/// aborts the tick.
pub fn advance_all(items: &mut [&mut dyn Advanceable], dt: f64) -> Result<(), EnvError> {
    if !(dt > 0.0) {
        return Err(EnvError::InvalidSpec(format!("advance dt must be > 0, got {dt}")));
    }
    for (index, item) in items.iter_mut().enumerate() {
        item.advance(dt).map_err(|e| EnvError::Advance {
            index,
            cause: e.0,
        })?;
    }
    Ok(())
}

pub fn validate_action(action: &[f64], act_dim: usize) -> Result<(), EnvError> {
    if action.len() != act_dim {
        return Err(EnvError::ActionShape {
            expected: act_dim,
            got: action.len(),
        });
    }
    if let Some(index) = action.iter().position(|a| !a.is_finite()) {
        return Err(EnvError::ActionValue { index });
    }
    Ok(())
}

/// Hook set of a stepped simulation.
///
/// Heavy resources are built by the constructor and kept across resets.
/// `reset` only restores episode-initial conditions, drawing any
/// randomization from the supplied generator.
pub trait Scenario: Send {
    /// Snapshot handed to `reward` as the pre-step state.
    type State: Clone;

    fn spec(&self) -> &ScenarioSpec;

    fn reset(&mut self, rng: &mut SimRng, options: &Info) -> Result<(), String>;

    fn apply_action(&mut self, action: &[f64]);

    /// One physics tick of size `dt`.
    fn advance_one(&mut self, dt: f64) -> Result<(), EnvError>;

    fn state(&self) -> &Self::State;

    fn observe(&self) -> Vec<f64>;

    /// Evaluated after advancing and observing. `self` holds the
    /// post-step state; `pre` is the state before the action was applied.
    fn reward(&self, pre: &Self::State, action: &[f64], obs: &[f64]) -> f64;

    /// Task-driven end of episode (solved or failed).
    fn terminated(&self) -> bool;

    fn state_is_finite(&self) -> bool;

    /// Per-step diagnostics merged into [`StepResult::info`].
    fn info(&self, _info: &mut Info) {}
}

/// Object-safe episodic environment, the unit hosted by a worker.
pub trait Environment: Send {
    fn spec(&self) -> &ScenarioSpec;
    fn reset(&mut self, seed: u64, options: &Info) -> Result<Vec<f64>, EnvError>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError>;
    fn clock(&self) -> EpisodeClock;
    fn is_active(&self) -> bool;
}

/// Executes the decision-step contract over a [`Scenario`].
pub struct Episode<S: Scenario> {
    scenario: S,
    decision_step: u32,
    active: bool,
    reward_floor: f64,
    last_obs: Vec<f64>,
}

impl<S: Scenario> Episode<S> {
    pub fn new(scenario: S) -> Self {
        Self::with_reward_floor(scenario, DEFAULT_REWARD_FLOOR)
    }

    pub fn with_reward_floor(scenario: S, reward_floor: f64) -> Self {
        Self {
            scenario,
            decision_step: 0,
            active: false,
            reward_floor,
            last_obs: Vec::new(),
        }
    }

    pub fn scenario(&self) -> &S {
        &self.scenario
    }

    pub fn scenario_mut(&mut self) -> &mut S {
        &mut self.scenario
    }

    pub fn reward_floor(&self) -> f64 {
        self.reward_floor
    }

    fn numerical_failure(&mut self, what: &str) -> StepResult {
        self.decision_step += 1;
        self.active = false;
        let mut info = Info::new();
        self.scenario.info(&mut info);
        info.retain(|_, v| json_is_finite(v));
        info.insert("numerical_failure".into(), Value::Bool(true));
        info.insert("numerical_failure_site".into(), Value::String(what.into()));
        StepResult {
            observation: self.last_obs.clone(),
            reward: self.reward_floor,
            terminated: true,
            truncated: false,
            info,
        }
    }
}

impl<S: Scenario> Environment for Episode<S> {
    fn spec(&self) -> &ScenarioSpec {
        self.scenario.spec()
    }

    fn reset(&mut self, seed: u64, options: &Info) -> Result<Vec<f64>, EnvError> {
        let mut rng = rng_from_seed(seed);
        self.active = false;
        self.scenario.reset(&mut rng, options).map_err(EnvError::Reset)?;
        let obs = self.scenario.observe();
        let obs_dim = self.scenario.spec().obs_dim;
        if obs.len() != obs_dim {
            return Err(EnvError::Reset(format!(
                "observation has length {}, expected {obs_dim}",
                obs.len()
            )));
        }
        if !self.scenario.state_is_finite() || obs.iter().any(|o| !o.is_finite()) {
            return Err(EnvError::Numerical("initial observation".into()));
        }
        self.decision_step = 0;
        self.active = true;
        self.last_obs = obs.clone();
        Ok(obs)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if !self.active {
            return Err(EnvError::EpisodeOver);
        }
        let (k, dt, horizon, act_dim) = {
            let spec = self.scenario.spec();
            (spec.steps_per_action, spec.sim_step_size, spec.horizon, spec.act_dim)
        };
        validate_action(action, act_dim)?;

        let pre = self.scenario.state().clone();
        self.scenario.apply_action(action);
        for _ in 0..k {
            match self.scenario.advance_one(dt) {
                Ok(()) => {}
                Err(EnvError::Numerical(site)) => return Ok(self.numerical_failure(&site)),
                Err(e) => {
                    self.active = false;
                    return Err(e);
                }
            }
        }
        if !self.scenario.state_is_finite() {
            return Ok(self.numerical_failure("state"));
        }
        let observation = self.scenario.observe();
        if observation.iter().any(|o| !o.is_finite()) {
            return Ok(self.numerical_failure("observation"));
        }
        let reward = self.scenario.reward(&pre, action, &observation);
        if !reward.is_finite() {
            return Ok(self.numerical_failure("reward"));
        }
        let terminated = self.scenario.terminated();
        self.decision_step += 1;
        let truncated = !terminated && self.decision_step >= horizon;

        let mut info = Info::new();
        self.scenario.info(&mut info);
        self.active = !(terminated || truncated);
        self.last_obs.clone_from(&observation);
        Ok(StepResult {
            observation,
            reward,
            terminated,
            truncated,
            info,
        })
    }

    fn clock(&self) -> EpisodeClock {
        let spec = self.scenario.spec();
        EpisodeClock {
            decision_step: self.decision_step,
            steps_per_action: spec.steps_per_action,
            sim_step_size: spec.sim_step_size,
        }
    }

    fn is_active(&self) -> bool {
        self.active
    }
}

fn json_is_finite(v: &Value) -> bool {
    match v {
        Value::Number(n) => n.as_f64().is_some_and(f64::is_finite),
        _ => true,
    }
}

/// Inserts a real into `info`, mapping non-finite values to `null`.
pub(crate) fn put_f64(info: &mut Info, key: &str, value: f64) {
    info.insert(
        key.to_string(),
        serde_json::Number::from_f64(value).map_or(Value::Null, Value::Number),
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Counter(u32);

    impl Advanceable for Counter {
        fn advance(&mut self, _dt: f64) -> Result<(), AdvanceFault> {
            self.0 += 1;
            Ok(())
        }
    }

    struct Failing;

    impl Advanceable for Failing {
        fn advance(&mut self, _dt: f64) -> Result<(), AdvanceFault> {
            Err(AdvanceFault("boom".into()))
        }
    }

    /// Point mass pushed by the action. State is (x, v).
    struct Toy {
        spec: ScenarioSpec,
        s: (f64, f64),
        force: f64,
        ticks: u32,
        fail_at: Option<f64>,
        nan_obs: bool,
    }

    impl Toy {
        fn new(k: u32, dt: f64, horizon: u32) -> Self {
            Self {
                spec: ScenarioSpec::new(dt, k, horizon, 2, 1).unwrap(),
                s: (0.0, 0.0),
                force: 0.0,
                ticks: 0,
                fail_at: None,
                nan_obs: false,
            }
        }
    }

    impl Scenario for Toy {
        type State = (f64, f64);

        fn spec(&self) -> &ScenarioSpec {
            &self.spec
        }

        fn reset(&mut self, _rng: &mut SimRng, options: &Info) -> Result<(), String> {
            if options.contains_key("explode") {
                return Err("explode requested".into());
            }
            self.s = (options.get("x0").and_then(Value::as_f64).unwrap_or(0.0), 0.0);
            self.ticks = 0;
            Ok(())
        }

        fn apply_action(&mut self, action: &[f64]) {
            self.force = action[0];
        }

        fn advance_one(&mut self, dt: f64) -> Result<(), EnvError> {
            self.s.1 += self.force * dt;
            self.s.0 += self.s.1 * dt;
            self.ticks += 1;
            if let Some(limit) = self.fail_at {
                if self.s.0 > limit {
                    self.s.0 = f64::NAN;
                }
            }
            Ok(())
        }

        fn state(&self) -> &(f64, f64) {
            &self.s
        }

        fn observe(&self) -> Vec<f64> {
            if self.nan_obs {
                return vec![f64::NAN, 0.0];
            }
            vec![self.s.0, self.s.1]
        }

        fn reward(&self, pre: &(f64, f64), _action: &[f64], obs: &[f64]) -> f64 {
            obs[0] - pre.0
        }

        fn terminated(&self) -> bool {
            self.s.0 > 10.0
        }

        fn state_is_finite(&self) -> bool {
            self.s.0.is_finite() && self.s.1.is_finite()
        }
    }

    #[test]
    fn advance_all_empty_is_noop() {
        advance_all(&mut [], 0.01).unwrap();
    }

    #[test]
    fn advance_all_steps_each_once_in_order() {
        let mut a = Counter(0);
        let mut b = Counter(10);
        advance_all(&mut [&mut a, &mut b], 0.01).unwrap();
        assert_eq!((a.0, b.0), (1, 11));
    }

    #[test]
    fn advance_all_reports_failing_index() {
        let mut a = Counter(0);
        let mut f = Failing;
        let mut c = Counter(0);
        let err = advance_all(&mut [&mut a, &mut f, &mut c], 0.01).unwrap_err();
        assert_eq!(err, EnvError::Advance { index: 1, cause: "boom".into() });
        assert_eq!(c.0, 0);
    }

    #[test]
    fn advance_all_rejects_nonpositive_dt() {
        assert!(advance_all(&mut [], 0.0).is_err());
    }

    #[test]
    fn validate_action_cases() {
        assert!(validate_action(&[0.0; 12], 12).is_ok());
        let mut nan = [0.0; 12];
        nan[4] = f64::NAN;
        assert_eq!(validate_action(&nan, 12), Err(EnvError::ActionValue { index: 4 }));
        assert_eq!(
            validate_action(&[0.0; 3], 12),
            Err(EnvError::ActionShape { expected: 12, got: 3 })
        );
        assert!(matches!(
            validate_action(&[f64::INFINITY], 1),
            Err(EnvError::ActionValue { index: 0 })
        ));
    }

    #[test]
    fn spec_rejects_invalid_values() {
        assert!(ScenarioSpec::new(0.0, 1, 1, 1, 1).is_err());
        assert!(ScenarioSpec::new(0.01, 0, 1, 1, 1).is_err());
        assert!(ScenarioSpec::new(0.01, 1, 0, 1, 1).is_err());
        assert!(ScenarioSpec::new(f64::NAN, 1, 1, 1, 1).is_err());
    }

    #[test]
    fn step_runs_k_ticks_and_obeys_clock_law() {
        let mut ep = Episode::new(Toy::new(4, 0.005, 50));
        ep.reset(0, &Info::new()).unwrap();
        for n in 1..=10u32 {
            ep.step(&[0.1]).unwrap();
            assert_eq!(ep.scenario().ticks, 4 * n);
            let t = ep.clock().sim_time();
            assert!((t - 0.02 * n as f64).abs() < 1e-12);
            assert_eq!(t, n as f64 * 4.0 * 0.005);
        }
    }

    #[test]
    fn truncation_at_horizon_only_when_not_terminated() {
        let mut ep = Episode::new(Toy::new(1, 0.1, 3));
        ep.reset(0, &Info::new()).unwrap();
        assert!(!ep.step(&[0.0]).unwrap().done());
        assert!(!ep.step(&[0.0]).unwrap().done());
        let last = ep.step(&[0.0]).unwrap();
        assert!(last.truncated && !last.terminated);
        assert_eq!(ep.step(&[0.0]), Err(EnvError::EpisodeOver));

        // terminated on the final step: truncated stays false
        let mut ep = Episode::new(Toy::new(1, 1.0, 1));
        ep.reset(0, &Info::new()).unwrap();
        let r = ep.step(&[100.0]).unwrap();
        assert!(r.terminated && !r.truncated);
    }

    #[test]
    fn step_rejects_bad_actions_without_advancing() {
        let mut ep = Episode::new(Toy::new(2, 0.1, 10));
        ep.reset(0, &Info::new()).unwrap();
        assert!(matches!(ep.step(&[0.0, 1.0]), Err(EnvError::ActionShape { .. })));
        assert!(matches!(ep.step(&[f64::NAN]), Err(EnvError::ActionValue { .. })));
        assert_eq!(ep.scenario().ticks, 0);
        assert!(ep.is_active());
    }

    #[test]
    fn reward_sees_pre_and_post_state() {
        let mut ep = Episode::new(Toy::new(1, 1.0, 10));
        ep.reset(0, &Info::new()).unwrap();
        let r = ep.step(&[1.0]).unwrap();
        // v = 1, x = 1: reward is x_post - x_pre
        assert_eq!(r.reward, 1.0);
        let r = ep.step(&[1.0]).unwrap();
        assert_eq!(r.reward, 2.0);
    }

    #[test]
    fn reset_hook_failure_surfaces_cause() {
        let mut ep = Episode::new(Toy::new(1, 1.0, 10));
        let mut opts = Info::new();
        opts.insert("explode".into(), Value::Bool(true));
        assert!(matches!(ep.reset(0, &opts), Err(EnvError::Reset(m)) if m.contains("explode")));
        assert!(!ep.is_active());
    }

    #[test]
    fn nan_initial_observation_is_numerical_error() {
        let mut toy = Toy::new(1, 1.0, 10);
        toy.nan_obs = true;
        let mut ep = Episode::new(toy);
        assert!(matches!(ep.reset(0, &Info::new()), Err(EnvError::Numerical(_))));
        assert!(!ep.is_active());
    }

    #[test]
    fn non_finite_state_terminates_with_floor() {
        let mut toy = Toy::new(1, 1.0, 10);
        toy.fail_at = Some(0.5);
        let mut ep = Episode::with_reward_floor(toy, -7.0);
        let obs0 = ep.reset(0, &Info::new()).unwrap();
        let r = ep.step(&[1.0]).unwrap();
        assert!(r.terminated && !r.truncated);
        assert_eq!(r.reward, -7.0);
        assert_eq!(r.info["numerical_failure"], Value::Bool(true));
        assert_eq!(r.observation, obs0);
        assert!(!ep.is_active());
    }

    #[test]
    fn determinism_of_trajectories() {
        let run = || {
            let mut ep = Episode::new(Toy::new(3, 0.01, 20));
            let mut out = vec![ep.reset(5, &Info::new()).unwrap()];
            for i in 0..20 {
                let r = ep.step(&[(i as f64).sin()]).unwrap();
                out.push(r.observation.clone());
                if r.done() {
                    break;
                }
            }
            out
        };
        assert_eq!(run(), run());
    }
}
