//! Lumped vertical-drop lander with ideal-plateau honeycomb absorbers.
//!
//! The lander falls freely from `drop_height`, touches down at
//! `v0 = sqrt(2 g h)` and is decelerated by `n_legs` crushable struts. Each
//! strut is rigid-perfectly-plastic: it carries its yield force `f_y` along
//! its axis while crushing and nothing else. Strut geometry enters only
//! through the factor `c = cos(alpha2) cos(beta)`, which maps axial force to
//! vertical force and vertical stroke to axial stroke, so the energy
//! absorbed by the struts is `n_legs * f_y * c * s` for vertical stroke `s`.
//!
//! When the available stroke `s_max` runs out the lander hits a rigid stop
//! and sheds its residual speed over `stop_length`. That residual energy is
//! not counted as absorbed.
//!
//! # Deceleration convention
//!
//! `a_max` is the peak *net* deceleration of the centre of mass (strut force
//! over mass, minus gravity), never including the 1 g offset. In the
//! bottom-out case it is the larger of the crush deceleration and the
//! rigid-stop deceleration `v_r^2 / (2 stop_length)`. The convention is also
//! reported in the env's step info under `a_max_convention`.

use crate::env::{
    advance_all, put_f64, AdvanceFault, Advanceable, EnvError, Info, Scenario, ScenarioSpec,
    DEFAULT_REWARD_FLOOR,
};
use crate::rng::SimRng;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LanderError {
    #[error("design never stops: net deceleration {net_decel} <= 0 with unbounded stroke")]
    DivergentDesign { net_decel: f64 },
    #[error("invalid lander parameters: {0}")]
    InvalidParams(String),
    #[error("design outside prior bounds: {0}")]
    OutOfBounds(String),
    #[error("integrator state became non-finite")]
    Numerical,
}

/// Design vector, ordered as `(f_y, beta, alpha2)` wherever it is flattened.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanderDesign {
    /// Axial yield force of one honeycomb strut, N.
    pub f_y: f64,
    /// Primary strut inclination, rad.
    pub alpha2: f64,
    /// Leg spread angle, rad.
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanderParams {
    pub mass: f64,
    /// Gravity magnitude, m/s^2.
    pub gravity: f64,
    pub drop_height: f64,
    pub n_legs: u32,
    /// Available vertical crush stroke; `null` in JSON means unbounded.
    #[serde(serialize_with = "inf_as_null", deserialize_with = "null_as_inf")]
    pub stroke_limit: f64,
    /// Distance over which the rigid stop removes residual speed.
    pub stop_length: f64,
    pub a_ref: f64,
    /// Weight on the absorbed-energy penalty.
    pub alpha_w: f64,
}

impl Default for LanderParams {
    fn default() -> Self {
        Self {
            mass: 1000.0,
            gravity: 1.62,
            drop_height: 1.0,
            n_legs: 6,
            stroke_limit: 0.5,
            stop_length: 1e-3,
            a_ref: 50.0,
            alpha_w: 1.0,
        }
    }
}

fn inf_as_null<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_none()
    } else {
        s.serialize_some(v)
    }
}

fn null_as_inf<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

impl LanderParams {
    pub fn validate(&self) -> Result<(), LanderError> {
        let positive = [
            ("mass", self.mass),
            ("gravity", self.gravity),
            ("stroke_limit", self.stroke_limit),
            ("stop_length", self.stop_length),
            ("a_ref", self.a_ref),
            ("alpha_w", self.alpha_w),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || v.is_nan() {
                return Err(LanderError::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.drop_height >= 0.0 && self.drop_height.is_finite()) {
            return Err(LanderError::InvalidParams(format!(
                "drop_height must be >= 0, got {}",
                self.drop_height
            )));
        }
        if self.n_legs == 0 {
            return Err(LanderError::InvalidParams("n_legs must be >= 1".into()));
        }
        Ok(())
    }

    /// Touchdown speed after a free drop from `drop_height`.
    pub fn touchdown_speed(&self) -> f64 {
        (2.0 * self.gravity * self.drop_height).sqrt()
    }

    /// Gravitational potential energy before the drop, `m g h`.
    pub fn initial_energy(&self) -> f64 {
        self.mass * self.gravity * self.drop_height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Priors over the design: log-uniform `f_y`, uniform `alpha2` and `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSet {
    pub f_y: Bounds,
    pub alpha2: Bounds,
    pub beta: Bounds,
}

impl Default for PriorSet {
    fn default() -> Self {
        Self {
            f_y: Bounds::new(1e2, 1e4),
            alpha2: Bounds::new(0.2, 1.2),
            beta: Bounds::new(0.0, 0.6),
        }
    }
}

impl PriorSet {
    pub fn validate(&self) -> Result<(), LanderError> {
        let half_pi = std::f64::consts::FRAC_PI_2;
        if !(self.f_y.lo > 0.0 && self.f_y.lo < self.f_y.hi && self.f_y.hi.is_finite()) {
            return Err(LanderError::InvalidParams(format!(
                "f_y prior needs 0 < lo < hi, got [{}, {}]",
                self.f_y.lo, self.f_y.hi
            )));
        }
        if !(self.alpha2.lo > 0.0 && self.alpha2.lo < self.alpha2.hi && self.alpha2.hi < half_pi) {
            return Err(LanderError::InvalidParams(format!(
                "alpha2 prior needs 0 < lo < hi < pi/2, got [{}, {}]",
                self.alpha2.lo, self.alpha2.hi
            )));
        }
        if !(self.beta.lo >= 0.0 && self.beta.lo <= self.beta.hi && self.beta.hi < half_pi) {
            return Err(LanderError::InvalidParams(format!(
                "beta prior needs 0 <= lo <= hi < pi/2, got [{}, {}]",
                self.beta.lo, self.beta.hi
            )));
        }
        Ok(())
    }

    pub fn check(&self, d: &LanderDesign) -> Result<(), LanderError> {
        if !(d.f_y.is_finite() && self.f_y.contains(d.f_y)) {
            return Err(LanderError::OutOfBounds(format!("f_y = {}", d.f_y)));
        }
        if !(d.alpha2.is_finite() && self.alpha2.contains(d.alpha2)) {
            return Err(LanderError::OutOfBounds(format!("alpha2 = {}", d.alpha2)));
        }
        if !(d.beta.is_finite() && self.beta.contains(d.beta)) {
            return Err(LanderError::OutOfBounds(format!("beta = {}", d.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TouchdownResult {
    /// Peak net deceleration, m/s^2 (see module docs).
    pub a_max: f64,
    pub stroke_used: f64,
    pub e_abs: f64,
    pub e_init: f64,
    pub bottomed_out: bool,
}

/// Vertical projection of a strut, `cos(alpha2) * cos(beta)`.
pub fn geometry_factor(alpha2: f64, beta: f64) -> f64 {
    alpha2.cos() * beta.cos()
}

/// Combined vertical plateau force of all struts, `n f_y c`.
fn plateau_force(design: &LanderDesign, params: &LanderParams) -> f64 {
    params.n_legs as f64 * design.f_y * geometry_factor(design.alpha2, design.beta)
}

/// Constant-deceleration kinematics of the plateau model.
pub fn simulate_touchdown_closed_form(
    design: &LanderDesign,
    params: &LanderParams,
) -> Result<TouchdownResult, LanderError> {
    params.validate()?;
    let force = plateau_force(design, params);
    let g = params.gravity;
    let net = force / params.mass - g;
    let v0_sq = 2.0 * g * params.drop_height;
    let e_init = params.initial_energy();
    let s_max = params.stroke_limit;

    if v0_sq == 0.0 && net >= 0.0 {
        // resting on unyielded struts
        return Ok(TouchdownResult {
            a_max: 0.0,
            stroke_used: 0.0,
            e_abs: 0.0,
            e_init,
            bottomed_out: false,
        });
    }
    if net > 0.0 {
        let s = v0_sq / (2.0 * net);
        if s <= s_max {
            return Ok(TouchdownResult {
                a_max: net,
                stroke_used: s,
                e_abs: force * s,
                e_init,
                bottomed_out: false,
            });
        }
    } else if s_max.is_infinite() {
        return Err(LanderError::DivergentDesign { net_decel: net });
    }

    let v_r_sq = (v0_sq - 2.0 * net.max(-g) * s_max).max(0.0);
    let stop_decel = v_r_sq / (2.0 * params.stop_length);
    Ok(TouchdownResult {
        a_max: stop_decel.max(net.max(0.0)),
        stroke_used: s_max,
        e_abs: force * s_max,
        e_init,
        bottomed_out: true,
    })
}

/// Time-stepped twin of [`simulate_touchdown_closed_form`].
///
/// State is the vertical crush stroke `x` (downward positive) and the
/// downward speed `v`, advanced with semi-implicit Euler. The tick on which
/// `v` would cross zero ends the crush without moving `x`; the tick that
/// would cross `s_max` is cut at the stop and the contact speed is solved
/// exactly for the constant acceleration of that tick.
#[derive(Debug, Clone)]
pub struct TouchdownIntegrator {
    force: f64,
    mass: f64,
    gravity: f64,
    stroke_limit: f64,
    stop_length: f64,
    e_init: f64,
    x: f64,
    v: f64,
    peak: f64,
    e_abs: f64,
    finished: bool,
    bottomed: bool,
}

impl TouchdownIntegrator {
    pub fn new(design: &LanderDesign, params: &LanderParams) -> Result<Self, LanderError> {
        params.validate()?;
        let force = plateau_force(design, params);
        let net = force / params.mass - params.gravity;
        if net <= 0.0 && params.stroke_limit.is_infinite() {
            return Err(LanderError::DivergentDesign { net_decel: net });
        }
        Ok(Self {
            force,
            mass: params.mass,
            gravity: params.gravity,
            stroke_limit: params.stroke_limit,
            stop_length: params.stop_length,
            e_init: params.initial_energy(),
            x: 0.0,
            v: params.touchdown_speed(),
            peak: 0.0,
            e_abs: 0.0,
            finished: false,
            bottomed: false,
        })
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn stroke(&self) -> f64 {
        self.x
    }

    pub fn speed(&self) -> f64 {
        self.v
    }

    pub fn peak_decel(&self) -> f64 {
        self.peak
    }

    pub fn absorbed(&self) -> f64 {
        self.e_abs
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.v.is_finite() && self.peak.is_finite() && self.e_abs.is_finite()
    }

    pub fn result(&self) -> TouchdownResult {
        TouchdownResult {
            a_max: self.peak,
            stroke_used: self.x,
            e_abs: self.e_abs,
            e_init: self.e_init,
            bottomed_out: self.bottomed,
        }
    }

    fn tick(&mut self, dt: f64) {
        if self.finished {
            return;
        }
        let accel_down = self.gravity - self.force / self.mass;
        if self.v <= 0.0 && accel_down <= 0.0 {
            self.v = 0.0;
            self.finished = true;
            return;
        }
        let net = -accel_down;
        let v_new = self.v + accel_down * dt;
        if v_new <= 0.0 {
            self.peak = self.peak.max(net);
            self.v = 0.0;
            self.finished = true;
            return;
        }
        let x_new = self.x + v_new * dt;
        if x_new >= self.stroke_limit {
            let remaining = self.stroke_limit - self.x;
            let v_r_sq = (self.v * self.v + 2.0 * accel_down * remaining).max(0.0);
            self.e_abs += self.force * remaining;
            self.x = self.stroke_limit;
            self.v = 0.0;
            self.peak = self.peak.max(net).max(v_r_sq / (2.0 * self.stop_length));
            self.bottomed = true;
            self.finished = true;
            return;
        }
        self.e_abs += self.force * (x_new - self.x);
        self.x = x_new;
        self.v = v_new;
        self.peak = self.peak.max(net);
    }
}

impl Advanceable for TouchdownIntegrator {
    fn advance(&mut self, dt: f64) -> Result<(), AdvanceFault> {
        self.tick(dt);
        if self.is_finite() {
            Ok(())
        } else {
            Err(AdvanceFault("touchdown state became non-finite".into()))
        }
    }
}

/// Hard cap on integrator ticks for the free-standing integration.
const MAX_TICKS: u64 = 200_000_000;

/// Integrates the touchdown until the lander stops or bottoms out.
pub fn integrate_touchdown(
    design: &LanderDesign,
    params: &LanderParams,
    dt: f64,
) -> Result<TouchdownResult, LanderError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(LanderError::InvalidParams(format!("dt must be > 0, got {dt}")));
    }
    let mut integ = TouchdownIntegrator::new(design, params)?;
    let mut ticks = 0u64;
    while !integ.finished() {
        integ.advance(dt).map_err(|_| LanderError::Numerical)?;
        ticks += 1;
        if ticks > MAX_TICKS {
            return Err(LanderError::Numerical);
        }
    }
    Ok(integ.result())
}

/// `J = a_max / a_ref + (alpha_w (e_abs / e_init - 1))^2`.
pub fn objective(result: &TouchdownResult, params: &LanderParams) -> Result<f64, LanderError> {
    if !(result.e_init > 0.0) {
        return Err(LanderError::InvalidParams(format!(
            "e_init must be > 0, got {}",
            result.e_init
        )));
    }
    if !(params.a_ref > 0.0) {
        return Err(LanderError::InvalidParams("a_ref must be > 0".into()));
    }
    let penalty = params.alpha_w * (result.e_abs / result.e_init - 1.0);
    Ok(result.a_max / params.a_ref + penalty * penalty)
}

fn uniform(rng: &mut SimRng, b: Bounds) -> f64 {
    if b.lo == b.hi {
        return b.lo;
    }
    b.lo + (b.hi - b.lo) * rng.random::<f64>()
}

/// Draws `f_y`, then `beta`, then `alpha2`.
pub fn sample_design(priors: &PriorSet, rng: &mut SimRng) -> LanderDesign {
    let f_y = if priors.f_y.lo == priors.f_y.hi {
        priors.f_y.lo
    } else {
        let u = uniform(rng, Bounds::new(priors.f_y.lo.ln(), priors.f_y.hi.ln()));
        u.exp().clamp(priors.f_y.lo, priors.f_y.hi)
    };
    let beta = uniform(rng, priors.beta);
    let alpha2 = uniform(rng, priors.alpha2);
    LanderDesign { f_y, alpha2, beta }
}

/// Configuration of the lander environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanderConfig {
    pub params: LanderParams,
    pub priors: PriorSet,
    /// Integrator tick, s.
    pub dt: f64,
    /// Simulated time budget for the single decision step, s.
    pub max_time: f64,
    pub reward_floor: f64,
}

impl Default for LanderConfig {
    fn default() -> Self {
        Self {
            params: LanderParams::default(),
            priors: PriorSet::default(),
            dt: 1e-4,
            max_time: 2.0,
            reward_floor: DEFAULT_REWARD_FLOOR,
        }
    }
}

impl LanderConfig {
    pub fn validate(&self) -> Result<(), LanderError> {
        self.params.validate()?;
        self.priors.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(LanderError::InvalidParams(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.max_time >= self.dt && self.max_time.is_finite()) {
            return Err(LanderError::InvalidParams("max_time must be >= dt".into()));
        }
        Ok(())
    }
}

/// One touchdown evaluated as a single-decision-step episode.
///
/// Reset options: `f_y`, `alpha2`, `beta` (all three, or none to sample the
/// design from the priors with the reset seed) and an optional
/// `drop_height` override. The action is a length-1 placeholder that is
/// ignored. The step reward is `-J`.
///
/// Observation: `[stroke, downward speed, peak net deceleration, absorbed
/// energy]`, so a fresh reset observes `[0, sqrt(2 g h), 0, 0]`.
pub struct LanderEnv {
    spec: ScenarioSpec,
    config: LanderConfig,
    params: LanderParams,
    design: LanderDesign,
    integ: TouchdownIntegrator,
}

impl LanderEnv {
    pub const OBS_DIM: usize = 4;
    pub const ACT_DIM: usize = 1;

    pub fn new(config: LanderConfig) -> Result<Self, EnvError> {
        config.validate().map_err(|e| EnvError::Config(e.to_string()))?;
        let steps = (config.max_time / config.dt).ceil();
        if steps > u32::MAX as f64 {
            return Err(EnvError::Config("max_time / dt exceeds u32 ticks".into()));
        }
        let spec = ScenarioSpec::new(config.dt, steps as u32, 1, Self::OBS_DIM, Self::ACT_DIM)?;
        let params = config.params.clone();
        let design = LanderDesign {
            f_y: config.priors.f_y.hi,
            alpha2: config.priors.alpha2.lo,
            beta: config.priors.beta.lo,
        };
        let integ = TouchdownIntegrator::new(&design, &params)
            .map_err(|e| EnvError::Config(e.to_string()))?;
        Ok(Self {
            spec,
            config,
            params,
            design,
            integ,
        })
    }

    pub fn config(&self) -> &LanderConfig {
        &self.config
    }

    pub fn design(&self) -> &LanderDesign {
        &self.design
    }

    /// Reset options that pin a design.
    pub fn design_options(design: &LanderDesign) -> Info {
        let mut o = Info::new();
        put_f64(&mut o, "f_y", design.f_y);
        put_f64(&mut o, "alpha2", design.alpha2);
        put_f64(&mut o, "beta", design.beta);
        o
    }

    fn design_from_options(&self, options: &Info, rng: &mut SimRng) -> Result<LanderDesign, String> {
        let keys = ["f_y", "alpha2", "beta"];
        let given: Vec<Option<f64>> = keys
            .iter()
            .map(|k| options.get(*k).map(|v| v.as_f64().ok_or(format!("option `{k}` must be a number"))))
            .map(Option::transpose)
            .collect::<Result<_, _>>()?;
        match given.as_slice() {
            [None, None, None] => Ok(sample_design(&self.config.priors, rng)),
            [Some(f_y), Some(alpha2), Some(beta)] => Ok(LanderDesign {
                f_y: *f_y,
                alpha2: *alpha2,
                beta: *beta,
            }),
            _ => Err("options must give all of f_y, alpha2, beta or none".into()),
        }
    }
}

impl Scenario for LanderEnv {
    type State = ();

    fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut SimRng, options: &Info) -> Result<(), String> {
        for key in options.keys() {
            if !matches!(key.as_str(), "f_y" | "alpha2" | "beta" | "drop_height") {
                return Err(format!("unknown reset option `{key}`"));
            }
        }
        let design = self.design_from_options(options, rng)?;
        self.config.priors.check(&design).map_err(|e| e.to_string())?;
        let mut params = self.config.params.clone();
        if let Some(h) = options.get("drop_height") {
            params.drop_height = h.as_f64().ok_or("option `drop_height` must be a number")?;
        }
        if !(params.drop_height > 0.0) {
            return Err(format!(
                "drop_height must be > 0 for a defined objective, got {}",
                params.drop_height
            ));
        }
        self.integ = TouchdownIntegrator::new(&design, &params).map_err(|e| e.to_string())?;
        self.design = design;
        self.params = params;
        Ok(())
    }

    fn apply_action(&mut self, _action: &[f64]) {}

    fn advance_one(&mut self, dt: f64) -> Result<(), EnvError> {
        advance_all(&mut [&mut self.integ], dt).map_err(|e| match e {
            EnvError::Advance { cause, .. } => EnvError::Numerical(cause),
            other => other,
        })
    }

    fn state(&self) -> &() {
        &()
    }

    fn observe(&self) -> Vec<f64> {
        vec![
            self.integ.stroke(),
            self.integ.speed(),
            self.integ.peak_decel(),
            self.integ.absorbed(),
        ]
    }

    fn reward(&self, _pre: &(), _action: &[f64], _obs: &[f64]) -> f64 {
        if !self.integ.finished() {
            return self.config.reward_floor;
        }
        objective(&self.integ.result(), &self.params).map_or(f64::NAN, |j| -j)
    }

    fn terminated(&self) -> bool {
        self.integ.finished()
    }

    fn state_is_finite(&self) -> bool {
        self.integ.is_finite()
    }

    fn info(&self, info: &mut Info) {
        let r = self.integ.result();
        put_f64(info, "a_max", r.a_max);
        put_f64(info, "stroke_used", r.stroke_used);
        put_f64(info, "e_abs", r.e_abs);
        put_f64(info, "e_init", r.e_init);
        info.insert("bottomed_out".into(), Value::Bool(r.bottomed_out));
        info.insert("a_max_convention".into(), Value::String("net".into()));
        info.insert("touchdown_complete".into(), Value::Bool(self.integ.finished()));
        if self.integ.finished() {
            if let Ok(j) = objective(&r, &self.params) {
                put_f64(info, "objective", j);
            }
        }
        put_f64(info, "f_y", self.design.f_y);
        put_f64(info, "alpha2", self.design.alpha2);
        put_f64(info, "beta", self.design.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Environment, Episode};
    use crate::rng::rng_from_seed;

    fn vertical(f_y: f64) -> LanderDesign {
        LanderDesign {
            f_y,
            alpha2: 0.0,
            beta: 0.0,
        }
    }

    /// Independent oracle: constant deceleration, energy balance.
    fn kinematic_oracle(f_y: f64, p: &LanderParams) -> (f64, f64, f64) {
        let v0_sq = 2.0 * p.gravity * p.drop_height;
        let a = p.n_legs as f64 * f_y / p.mass - p.gravity;
        let s = v0_sq / (2.0 * a);
        let e_abs = 0.5 * p.mass * v0_sq + p.mass * p.gravity * s;
        (a, s, e_abs)
    }

    #[test]
    fn geometry_factor_cases() {
        assert_eq!(geometry_factor(0.0, 0.0), 1.0);
        assert!((geometry_factor(std::f64::consts::FRAC_PI_3, 0.0) - 0.5).abs() < 1e-15);
        // Taylor series of cos to 20 terms as an independent table
        let cos_series = |x: f64| {
            let mut term = 1.0;
            let mut sum = 1.0;
            for n in 1..20 {
                term *= -x * x / ((2 * n - 1) as f64 * (2 * n) as f64);
                sum += term;
            }
            sum
        };
        let c = geometry_factor(0.4, 0.3);
        assert!((c - cos_series(0.4) * cos_series(0.3)).abs() < 1e-14);
        assert!((c - 0.879_923_176_281_257).abs() < 1e-12);
    }

    #[test]
    fn closed_form_reference_case() {
        let p = LanderParams::default();
        let r = simulate_touchdown_closed_form(&vertical(1000.0), &p).unwrap();
        let (a, s, e_abs) = kinematic_oracle(1000.0, &p);
        assert!((a - 4.38).abs() < 1e-12);
        assert!((r.a_max - a).abs() < 1e-12);
        assert!((r.stroke_used - s).abs() < 1e-12);
        assert!((r.stroke_used - 0.369_863).abs() < 1e-6);
        assert!((r.e_abs - e_abs).abs() < 1e-9);
        assert!((r.e_abs - 2219.178).abs() < 1e-2);
        assert!((r.e_init - 1620.0).abs() < 1e-9);
        assert!(!r.bottomed_out);

        let j = objective(&r, &p).unwrap();
        let expect = 4.38 / 50.0 + (e_abs / 1620.0 - 1.0).powi(2);
        assert!((j - expect).abs() < 1e-12);
        assert!((j - 0.2244).abs() < 1e-4);
    }

    #[test]
    fn zero_net_force_bottoms_out_at_full_speed() {
        let p = LanderParams::default();
        let f_y = p.mass * p.gravity / p.n_legs as f64;
        let r = simulate_touchdown_closed_form(&vertical(f_y), &p).unwrap();
        assert!(r.bottomed_out);
        assert_eq!(r.stroke_used, p.stroke_limit);
        let v0_sq = 2.0 * p.gravity * p.drop_height;
        assert!((r.a_max - v0_sq / (2.0 * p.stop_length)).abs() < 1e-6);
    }

    #[test]
    fn stiff_limit() {
        let p = LanderParams::default();
        let f_y = 1e9;
        let r = simulate_touchdown_closed_form(&vertical(f_y), &p).unwrap();
        assert!(r.stroke_used < 1e-6);
        let ke = 0.5 * p.mass * 2.0 * p.gravity * p.drop_height;
        assert!((r.e_abs - ke).abs() / ke < 1e-5);
        assert!((r.a_max - (6.0 * f_y / p.mass - p.gravity)).abs() < 1e-3);
    }

    #[test]
    fn unbounded_stroke_with_weak_struts_diverges() {
        let p = LanderParams {
            stroke_limit: f64::INFINITY,
            ..LanderParams::default()
        };
        let err = simulate_touchdown_closed_form(&vertical(100.0), &p).unwrap_err();
        assert!(matches!(err, LanderError::DivergentDesign { .. }));
        assert!(integrate_touchdown(&vertical(100.0), &p, 1e-4).is_err());
        // but a strong design still stops
        assert!(simulate_touchdown_closed_form(&vertical(1000.0), &p).is_ok());
    }

    #[test]
    fn integrator_matches_reference_case() {
        let p = LanderParams::default();
        let cf = simulate_touchdown_closed_form(&vertical(1000.0), &p).unwrap();
        let r = integrate_touchdown(&vertical(1000.0), &p, 1e-4).unwrap();
        assert!((r.a_max - 4.38).abs() / 4.38 < 0.01);
        assert!((r.stroke_used - cf.stroke_used).abs() / cf.stroke_used < 0.01);
        assert!((r.e_abs - cf.e_abs).abs() / cf.e_abs < 0.01);
        assert!(!r.bottomed_out);
    }

    #[test]
    fn integrator_converges_with_dt() {
        let p = LanderParams::default();
        let d = LanderDesign {
            f_y: 1500.0,
            alpha2: 0.4,
            beta: 0.3,
        };
        let cf = simulate_touchdown_closed_form(&d, &p).unwrap();
        let errs: Vec<f64> = [1e-3, 5e-4, 2.5e-4, 1.25e-4]
            .iter()
            .map(|&dt| (integrate_touchdown(&d, &p, dt).unwrap().stroke_used - cf.stroke_used).abs())
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] < w[0], "{errs:?}");
            // first order: halving dt at least roughly halves the error
            assert!(w[1] < 0.75 * w[0], "{errs:?}");
        }
    }

    #[test]
    fn zero_drop_height_absorbs_nothing() {
        let p = LanderParams {
            drop_height: 0.0,
            ..LanderParams::default()
        };
        let r = integrate_touchdown(&vertical(1000.0), &p, 1e-4).unwrap();
        assert_eq!((r.stroke_used, r.e_abs, r.a_max), (0.0, 0.0, 0.0));
        let cf = simulate_touchdown_closed_form(&vertical(1000.0), &p).unwrap();
        assert_eq!((cf.stroke_used, cf.e_abs, cf.a_max), (0.0, 0.0, 0.0));
        // objective undefined without initial energy
        assert!(matches!(objective(&r, &p), Err(LanderError::InvalidParams(_))));
    }

    #[test]
    fn objective_fixed_points() {
        let p = LanderParams::default();
        let mk = |a_max, e_abs| TouchdownResult {
            a_max,
            stroke_used: 0.1,
            e_abs,
            e_init: 1620.0,
            bottomed_out: false,
        };
        assert_eq!(objective(&mk(p.a_ref, 1620.0), &p).unwrap(), 1.0);
        assert_eq!(objective(&mk(0.0, 1620.0), &p).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_energy_audit_and_monotonicity() {
        let p = LanderParams::default();
        let mut prev: Option<TouchdownResult> = None;
        for i in 0..200 {
            let f_y = 1000.0 + 50.0 * i as f64;
            let r = simulate_touchdown_closed_form(&vertical(f_y), &p).unwrap();
            assert!(!r.bottomed_out);
            let audit = 0.5 * p.mass * 2.0 * p.gravity * p.drop_height
                + p.mass * p.gravity * r.stroke_used;
            assert!((r.e_abs - audit).abs() <= 1e-9 * audit);
            if let Some(prev) = prev {
                assert!(r.a_max > prev.a_max);
                assert!(r.stroke_used < prev.stroke_used);
            }
            prev = Some(r);
        }
    }

    #[test]
    fn degenerate_prior_is_constant() {
        let priors = PriorSet {
            f_y: Bounds::new(2500.0, 2500.0),
            ..PriorSet::default()
        };
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            assert_eq!(sample_design(&priors, &mut rng).f_y, 2500.0);
        }
    }

    #[test]
    fn prior_sampling_statistics() {
        let priors = PriorSet::default();
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let mut low_decade = 0usize;
        let mut alpha_sum = 0.0;
        for _ in 0..n {
            let d = sample_design(&priors, &mut rng);
            priors.check(&d).unwrap();
            if d.f_y <= 1e3 {
                low_decade += 1;
            }
            alpha_sum += d.alpha2;
        }
        let frac = low_decade as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
        assert!((alpha_sum / n as f64 - 0.7).abs() < 0.01);
    }

    #[test]
    fn params_round_trip_unbounded_stroke_as_null() {
        let p = LanderParams {
            stroke_limit: f64::INFINITY,
            ..LanderParams::default()
        };
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"stroke_limit\":null"));
        let back: LanderParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn env_initial_observation_encodes_drop() {
        let mut ep = Episode::new(LanderEnv::new(LanderConfig::default()).unwrap());
        let mut opts = Info::new();
        put_f64(&mut opts, "drop_height", 1.0);
        let obs = ep.reset(3, &opts).unwrap();
        let v0 = (2.0f64 * 1.62 * 1.0).sqrt();
        assert_eq!(obs, vec![0.0, v0, 0.0, 0.0]);
    }

    #[test]
    fn env_single_step_returns_negative_objective() {
        let mut ep = Episode::new(LanderEnv::new(LanderConfig::default()).unwrap());
        let d = LanderDesign {
            f_y: 1000.0,
            alpha2: 0.2,
            beta: 0.0,
        };
        ep.reset(0, &LanderEnv::design_options(&d)).unwrap();
        let r = ep.step(&[0.0]).unwrap();
        assert!(r.terminated && !r.truncated);
        let p = LanderParams::default();
        let integ = integrate_touchdown(&d, &p, 1e-4).unwrap();
        assert_eq!(r.reward, -objective(&integ, &p).unwrap());
        assert_eq!(r.info["bottomed_out"], Value::Bool(integ.bottomed_out));
        assert_eq!(r.info["a_max_convention"], Value::String("net".into()));
    }

    #[test]
    fn env_rejects_out_of_prior_and_partial_designs() {
        let mut ep = Episode::new(LanderEnv::new(LanderConfig::default()).unwrap());
        let bad = LanderDesign {
            f_y: 10.0,
            alpha2: 0.5,
            beta: 0.1,
        };
        assert!(matches!(ep.reset(0, &LanderEnv::design_options(&bad)), Err(EnvError::Reset(_))));
        let mut partial = Info::new();
        put_f64(&mut partial, "f_y", 1000.0);
        assert!(matches!(ep.reset(0, &partial), Err(EnvError::Reset(_))));
        let mut unknown = Info::new();
        put_f64(&mut unknown, "fy", 1000.0);
        assert!(matches!(ep.reset(0, &unknown), Err(EnvError::Reset(_))));
    }

    #[test]
    fn env_seeded_reset_samples_prior() {
        let mut ep = Episode::new(LanderEnv::new(LanderConfig::default()).unwrap());
        ep.reset(9, &Info::new()).unwrap();
        let d1 = *ep.scenario().design();
        ep.reset(9, &Info::new()).unwrap();
        assert_eq!(*ep.scenario().design(), d1);
        let mut rng = rng_from_seed(9);
        assert_eq!(d1, sample_design(&PriorSet::default(), &mut rng));
    }
}
