//! Velocity-tracking proxy environment.
//!
//! Keeps the interface of a quadruped velocity-tracking task (45-dim
//! observation, 12-dim position-target action, multi-term reward,
//! early termination on instability) over cheap proxy dynamics:
//!
//! * each joint is a first-order filter toward its target
//!   `action_scale * a + q_default` with time constant `tau`;
//! * base accelerations are a fixed linear mix of the joint offsets,
//!   `[vx', vy', wz', vz'] = M (q - q_default) - damping * [vx, vy, wz, vz]`;
//! * height integrates the vertical velocity.
//!
//! Observation layout (each group multiplied by its scale factor):
//!
//! | indices | group |
//! |---------|-------|
//! | 0..3    | body angular velocity `(0, 0, wz)` |
//! | 3..6    | projected gravity, always `(0, 0, -1)` |
//! | 6..9    | command `(vx, vy, wz)` |
//! | 9..21   | joint offsets `q - q_default` |
//! | 21..33  | joint velocities |
//! | 33..45  | previous action |

use crate::env::{put_f64, EnvError, Info, Scenario, ScenarioSpec, DEFAULT_REWARD_FLOOR};
use crate::lander::Bounds;
use crate::rng::SimRng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const OBS_DIM: usize = 45;
pub const ACT_DIM: usize = 12;
pub const N_JOINTS: usize = 12;

/// Seed the mixing matrix was generated from, see [`generate_mixing`].
pub const MIXING_SEED: u64 = 0x7EAC_4E12;
/// Per-row gain applied by the generator (vertical coupling is weak).
pub const MIXING_ROW_GAIN: [f64; 4] = [1.0, 1.0, 1.0, 0.25];

/// Rows map joint offsets to `vx'`, `vy'`, `wz'`, `vz'`. Height has no row;
/// it only integrates `vz`.
pub const MIXING: [[f64; N_JOINTS]; 4] = [
    [
        -0.33313301471950396, 0.6443648871890666, -0.16879459194104784, -0.01896848290528963,
        0.5464637688214411, -0.6189626494128602, -0.4783747639213787, -0.41370014438185376,
        -0.5131686986573343, -0.628034429659343, -0.6406518906905581, -0.2535636531277903,
    ],
    [
        0.7674560958376853, 0.9981916021971164, 0.2799651316388885, -0.158333812476241,
        -0.7002218864344554, 0.6686718216791903, 0.33799149635186954, -0.2719013240954049,
        -0.8942747193368437, 0.04495790020741919, 0.4475672910822752, -0.94384349592961,
    ],
    [
        0.31347663325292907, -0.4788869152331605, 0.11068722930608121, 0.04408275873166301,
        0.18498237551012564, 0.498379025791696, 0.4841376328009779, -0.205039756661348,
        -0.7682780499361477, 0.2267018765537594, 0.8311333759040731, 0.882492499987783,
    ],
    [
        0.1898197260876648, -0.05874668977131725, 0.22264500311762325, 0.14559858420332245,
        0.21893636787465398, -0.1911341432037595, -0.09369978616439356, -0.10430953904372475,
        0.10463188448894789, 0.09564855236153769, 0.1479994854300135, 0.18211782402671872,
    ],
];

/// Regenerates [`MIXING`]: entry `(i, j)` is
/// `(2u - 1) * MIXING_ROW_GAIN[i]` with `u` the top 53 bits of
/// `derive_seed(MIXING_SEED, 12 i + j)` scaled to `[0, 1)`.
pub fn generate_mixing() -> [[f64; N_JOINTS]; 4] {
    let mut m = [[0.0; N_JOINTS]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            let bits = crate::rng::derive_seed(MIXING_SEED, (i * N_JOINTS + j) as u64) >> 11;
            let u = bits as f64 * (1.0 / (1u64 << 53) as f64);
            *x = (2.0 * u - 1.0) * MIXING_ROW_GAIN[i];
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObsScales {
    pub angvel: f64,
    pub gravity: f64,
    pub command: f64,
    pub q: f64,
    pub qd: f64,
    pub prev_action: f64,
}

impl Default for ObsScales {
    fn default() -> Self {
        Self {
            angvel: 0.25,
            gravity: 1.0,
            command: 1.0,
            q: 1.0,
            qd: 0.05,
            prev_action: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerWeights {
    pub w_track: f64,
    pub sigma_track: f64,
    pub w_yaw: f64,
    pub w_vz: f64,
    pub w_height: f64,
    pub w_rate: f64,
    pub w_joint: f64,
    pub scales: ObsScales,
}

impl Default for TrackerWeights {
    fn default() -> Self {
        Self {
            w_track: 1.0,
            sigma_track: 0.25,
            w_yaw: 0.05,
            w_vz: 0.1,
            w_height: 0.5,
            w_rate: 0.01,
            w_joint: 0.002,
            scales: ObsScales::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommandBounds {
    pub vx: Bounds,
    pub vy: Bounds,
    pub omega: Bounds,
}

impl Default for CommandBounds {
    fn default() -> Self {
        Self {
            vx: Bounds::new(-1.0, 1.0),
            vy: Bounds::new(-0.5, 0.5),
            omega: Bounds::new(-0.5, 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Physics tick, s.
    pub dt: f64,
    /// Physics ticks per decision step.
    pub steps_per_action: u32,
    pub horizon: u32,
    pub weights: TrackerWeights,
    pub commands: CommandBounds,
    /// Joint filter time constant, s.
    pub tau: f64,
    /// Linear damping on base velocities, 1/s.
    pub damping: f64,
    pub action_scale: f64,
    pub q_default: [f64; N_JOINTS],
    pub nominal_height: f64,
    /// Termination threshold on planar speed, m/s.
    pub v_limit: f64,
    /// Termination threshold on height deviation, m.
    pub h_limit: f64,
    pub reward_floor: f64,
    /// Replaces the generated mixing matrix when set.
    pub mixing: Option<[[f64; N_JOINTS]; 4]>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            dt: 0.005,
            steps_per_action: 4,
            horizon: 500,
            weights: TrackerWeights::default(),
            commands: CommandBounds::default(),
            tau: 0.05,
            damping: 2.0,
            action_scale: 0.5,
            q_default: [0.0; N_JOINTS],
            nominal_height: 0.3,
            v_limit: 3.0,
            h_limit: 0.25,
            reward_floor: DEFAULT_REWARD_FLOOR,
            mixing: None,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Config(m));
        if !(self.weights.sigma_track > 0.0) {
            return bad("weights.sigma_track must be > 0".into());
        }
        let w = &self.weights;
        for (name, v) in [
            ("w_track", w.w_track),
            ("w_yaw", w.w_yaw),
            ("w_vz", w.w_vz),
            ("w_height", w.w_height),
            ("w_rate", w.w_rate),
            ("w_joint", w.w_joint),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("weights.{name} must be a nonnegative real"));
            }
        }
        for (name, v) in [
            ("tau", self.tau),
            ("v_limit", self.v_limit),
            ("h_limit", self.h_limit),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0"));
            }
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return bad("damping must be >= 0".into());
        }
        if self.tau < self.dt {
            return bad(format!("tau ({}) must be >= dt ({}) for a stable joint filter", self.tau, self.dt));
        }
        for (name, b) in [
            ("vx", self.commands.vx),
            ("vy", self.commands.vy),
            ("omega", self.commands.omega),
        ] {
            if !(b.lo <= b.hi && b.lo.is_finite() && b.hi.is_finite()) {
                return bad(format!("commands.{name} needs lo <= hi"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub v_xy: [f64; 2],
    pub omega_z: f64,
    pub v_z: f64,
    pub height: f64,
    pub q: [f64; N_JOINTS],
    pub qd: [f64; N_JOINTS],
    pub prev_action: [f64; N_JOINTS],
    /// `(vx, vy, omega)`.
    pub command: [f64; 3],
}

impl TrackerState {
    pub fn at_rest(cfg: &TrackerConfig, command: [f64; 3]) -> Self {
        Self {
            v_xy: [0.0; 2],
            omega_z: 0.0,
            v_z: 0.0,
            height: cfg.nominal_height,
            q: cfg.q_default,
            qd: [0.0; N_JOINTS],
            prev_action: [0.0; N_JOINTS],
            command,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v_xy.iter().all(|x| x.is_finite())
            && self.omega_z.is_finite()
            && self.v_z.is_finite()
            && self.height.is_finite()
            && self.q.iter().chain(&self.qd).chain(&self.prev_action).all(|x| x.is_finite())
    }
}

pub fn compose_observation(state: &TrackerState, cfg: &TrackerConfig) -> Vec<f64> {
    let s = &cfg.weights.scales;
    let mut obs = Vec::with_capacity(OBS_DIM);
    obs.extend_from_slice(&[0.0, 0.0, s.angvel * state.omega_z]);
    obs.extend_from_slice(&[0.0, 0.0, -s.gravity]);
    obs.extend(state.command.iter().map(|c| s.command * c));
    obs.extend(state.q.iter().zip(&cfg.q_default).map(|(q, q0)| s.q * (q - q0)));
    obs.extend(state.qd.iter().map(|qd| s.qd * qd));
    obs.extend(state.prev_action.iter().map(|a| s.prev_action * a));
    debug_assert_eq!(obs.len(), OBS_DIM);
    obs
}

/// One physics tick of the proxy dynamics with `action` held fixed.
/// `prev_action` is left untouched; the env records it per decision step.
pub fn tracker_dynamics_step(
    state: &TrackerState,
    action: &[f64],
    dt: f64,
    cfg: &TrackerConfig,
    mixing: &[[f64; N_JOINTS]; 4],
) -> Result<TrackerState, EnvError> {
    let mut next = state.clone();
    for j in 0..N_JOINTS {
        let target = cfg.action_scale * action[j] + cfg.q_default[j];
        next.qd[j] = (target - state.q[j]) / cfg.tau;
        next.q[j] = state.q[j] + next.qd[j] * dt;
    }
    let mut acc = [0.0; 4];
    for (a, row) in acc.iter_mut().zip(mixing) {
        *a = row
            .iter()
            .zip(next.q.iter().zip(&cfg.q_default))
            .map(|(m, (q, q0))| m * (q - q0))
            .sum();
    }
    let d = cfg.damping;
    next.v_xy[0] += (acc[0] - d * state.v_xy[0]) * dt;
    next.v_xy[1] += (acc[1] - d * state.v_xy[1]) * dt;
    next.omega_z += (acc[2] - d * state.omega_z) * dt;
    next.v_z += (acc[3] - d * state.v_z) * dt;
    next.height += next.v_z * dt;
    if !next.is_finite() {
        return Err(EnvError::Numerical("tracker state".into()));
    }
    Ok(next)
}

pub fn tracker_reward(
    state: &TrackerState,
    action: &[f64],
    prev_action: &[f64],
    cfg: &TrackerConfig,
) -> f64 {
    let w = &cfg.weights;
    let ex = state.v_xy[0] - state.command[0];
    let ey = state.v_xy[1] - state.command[1];
    let track = w.w_track * (-(ex * ex + ey * ey) / w.sigma_track).exp();
    let yaw = w.w_yaw * (state.omega_z - state.command[2]).powi(2);
    let vz = w.w_vz * state.v_z * state.v_z;
    let height = w.w_height * (state.height - cfg.nominal_height).powi(2);
    let rate: f64 = action.iter().zip(prev_action).map(|(a, p)| (a - p) * (a - p)).sum();
    let joint: f64 = state
        .q
        .iter()
        .zip(&cfg.q_default)
        .map(|(q, q0)| (q - q0) * (q - q0))
        .sum();
    track - yaw - vz - height - w.w_rate * rate - w.w_joint * joint
}

/// `(terminated, truncated)`.
pub fn tracker_status(
    state: &TrackerState,
    decision_step: u32,
    horizon: u32,
    cfg: &TrackerConfig,
) -> (bool, bool) {
    let speed = state.v_xy[0].hypot(state.v_xy[1]);
    let terminated = !state.is_finite()
        || speed > cfg.v_limit
        || (state.height - cfg.nominal_height).abs() > cfg.h_limit;
    (terminated, !terminated && decision_step >= horizon)
}

/// Uniform per component, drawn vx, vy, omega.
pub fn sample_command(rng: &mut SimRng, bounds: &CommandBounds) -> [f64; 3] {
    let mut draw = |b: Bounds| {
        let u: f64 = rng.random();
        b.lo + (b.hi - b.lo) * u
    };
    [draw(bounds.vx), draw(bounds.vy), draw(bounds.omega)]
}

/// Proxy velocity-tracking scenario.
///
/// Reset draws the command from the seed (unless the `command` option pins
/// it as a 3-array). The joint-rate penalty compares the applied action with
/// the previous one taken from the pre-step state.
pub struct TrackerEnv {
    spec: ScenarioSpec,
    cfg: TrackerConfig,
    mixing: [[f64; N_JOINTS]; 4],
    state: TrackerState,
    action: [f64; N_JOINTS],
}

impl TrackerEnv {
    pub fn new(cfg: TrackerConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let spec = ScenarioSpec::new(cfg.dt, cfg.steps_per_action, cfg.horizon, OBS_DIM, ACT_DIM)?;
        let mixing = cfg.mixing.unwrap_or(MIXING);
        let state = TrackerState::at_rest(&cfg, [0.0; 3]);
        Ok(Self {
            spec,
            cfg,
            mixing,
            state,
            action: [0.0; N_JOINTS],
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn tracker_state(&self) -> &TrackerState {
        &self.state
    }
}

impl Scenario for TrackerEnv {
    type State = TrackerState;

    fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut SimRng, options: &Info) -> Result<(), String> {
        for key in options.keys() {
            if key != "command" {
                return Err(format!("unknown reset option `{key}`"));
            }
        }
        let sampled = sample_command(rng, &self.cfg.commands);
        let command = match options.get("command") {
            None => sampled,
            Some(v) => {
                let arr: Vec<f64> = serde_json::from_value(v.clone())
                    .map_err(|e| format!("option `command`: {e}"))?;
                <[f64; 3]>::try_from(arr).map_err(|_| "option `command` needs 3 entries".to_string())?
            }
        };
        self.state = TrackerState::at_rest(&self.cfg, command);
        self.action = [0.0; N_JOINTS];
        Ok(())
    }

    fn apply_action(&mut self, action: &[f64]) {
        self.action.copy_from_slice(action);
    }

    fn advance_one(&mut self, dt: f64) -> Result<(), EnvError> {
        let mut next = tracker_dynamics_step(&self.state, &self.action, dt, &self.cfg, &self.mixing)?;
        next.prev_action = self.action;
        self.state = next;
        Ok(())
    }

    fn state(&self) -> &TrackerState {
        &self.state
    }

    fn observe(&self) -> Vec<f64> {
        compose_observation(&self.state, &self.cfg)
    }

    fn reward(&self, pre: &TrackerState, action: &[f64], _obs: &[f64]) -> f64 {
        tracker_reward(&self.state, action, &pre.prev_action, &self.cfg)
    }

    fn terminated(&self) -> bool {
        // truncation is the episode runner's concern
        tracker_status(&self.state, 0, u32::MAX, &self.cfg).0
    }

    fn state_is_finite(&self) -> bool {
        self.state.is_finite()
    }

    fn info(&self, info: &mut Info) {
        put_f64(info, "v_x", self.state.v_xy[0]);
        put_f64(info, "v_y", self.state.v_xy[1]);
        put_f64(info, "omega_z", self.state.omega_z);
        put_f64(info, "height", self.state.height);
        info.insert(
            "command".into(),
            Value::Array(
                self.state
                    .command
                    .iter()
                    .map(|c| serde_json::Number::from_f64(*c).map_or(Value::Null, Value::Number))
                    .collect(),
            ),
        );
    }
}
