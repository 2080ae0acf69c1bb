//! Tree-structured Parzen estimator over independent bounded dimensions.
//!
//! Complete trials are split into good and bad sets. Each set gives, per
//! dimension, a mixture of truncated Gaussians (one per observed point plus
//! one wide prior component, all with equal weight). A proposal draws
//! `n_candidates` values from the good mixture `l` and keeps the one with
//! the largest `l(x) / g(x)`.
//!
//! Kernel width of point `i` among `n` sorted points:
//! `max(gap to left neighbour, gap to right neighbour)`, where the bounds
//! stand in for missing neighbours, then clipped to
//! `[(hi - lo) / min(100, n + 1), hi - lo]`. The prior component sits at
//! the interval midpoint with width `hi - lo`. With no points at all the
//! estimator is the prior itself. Log-scaled dimensions run all of this on
//! `ln x`.

use super::study::{tpe_split, Params, Study};
use crate::lander::{Bounds, PriorSet};
use crate::rng::SimRng;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, SQRT_2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub bounds: Bounds,
    pub log: bool,
}

impl Dimension {
    pub fn uniform(name: &str, bounds: Bounds) -> Self {
        Self {
            name: name.into(),
            bounds,
            log: false,
        }
    }

    pub fn log_uniform(name: &str, bounds: Bounds) -> Self {
        Self {
            name: name.into(),
            bounds,
            log: true,
        }
    }

    fn to_internal(&self, x: f64) -> f64 {
        if self.log {
            x.ln()
        } else {
            x
        }
    }

    fn from_internal(&self, u: f64) -> f64 {
        let x = if self.log { u.exp() } else { u };
        x.clamp(self.bounds.lo, self.bounds.hi)
    }

    fn internal_bounds(&self) -> (f64, f64) {
        (self.to_internal(self.bounds.lo), self.to_internal(self.bounds.hi))
    }

    /// Draw from the prior (log-uniform or uniform). One `f64` is consumed
    /// unless the interval is degenerate.
    pub fn sample_prior(&self, rng: &mut SimRng) -> f64 {
        let (a, b) = self.internal_bounds();
        if a == b {
            return self.bounds.lo;
        }
        self.from_internal(a + (b - a) * rng.random::<f64>())
    }
}

/// Ordered search space; prior draws happen in this order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dimension>,
}

impl SearchSpace {
    /// `f_y` (log-uniform), `beta`, `alpha2`: the draw order of
    /// [`crate::lander::sample_design`].
    pub fn lander(priors: &PriorSet) -> Self {
        Self {
            dims: vec![
                Dimension::log_uniform("f_y", priors.f_y),
                Dimension::uniform("beta", priors.beta),
                Dimension::uniform("alpha2", priors.alpha2),
            ],
        }
    }

    pub fn sample_prior(&self, rng: &mut SimRng) -> Params {
        self.dims.iter().map(|d| (d.name.clone(), d.sample_prior(rng))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpeConfig {
    pub n_startup: usize,
    pub gamma: f64,
    pub n_candidates: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            n_startup: 10,
            gamma: 0.25,
            n_candidates: 24,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_startup < 1 {
            return Err("n_startup must be >= 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err("gamma must lie in (0, 1)".into());
        }
        if self.n_candidates < 1 {
            return Err("n_candidates must be >= 1".into());
        }
        Ok(())
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / SQRT_2))
}

/// One-dimensional truncated-Gaussian mixture on `[a, b]` in internal space.
#[derive(Debug, Clone, PartialEq)]
pub struct Parzen {
    a: f64,
    b: f64,
    log: bool,
    mus: Vec<f64>,
    sigmas: Vec<f64>,
    /// Probability mass of each untruncated kernel inside `[a, b]`.
    masses: Vec<f64>,
    /// No observations: the estimator is the prior itself.
    prior_only: bool,
}

impl Parzen {
    /// `points` are in the dimension's natural units.
    pub fn new(points: &[f64], dim: &Dimension) -> Self {
        let (a, b) = dim.internal_bounds();
        let width = b - a;
        let mut us: Vec<f64> = points.iter().map(|x| dim.to_internal(*x).clamp(a, b)).collect();
        us.sort_by(f64::total_cmp);
        let n = us.len();
        let floor = width / (n as f64 + 1.0).min(100.0);
        let mut mus = Vec::with_capacity(n + 1);
        let mut sigmas = Vec::with_capacity(n + 1);
        for i in 0..n {
            let left = if i == 0 { us[i] - a } else { us[i] - us[i - 1] };
            let right = if i + 1 == n { b - us[i] } else { us[i + 1] - us[i] };
            mus.push(us[i]);
            sigmas.push(left.max(right).clamp(floor, width));
        }
        mus.push(0.5 * (a + b));
        sigmas.push(width);
        let masses = mus
            .iter()
            .zip(&sigmas)
            .map(|(m, s)| normal_cdf((b - m) / s) - normal_cdf((a - m) / s))
            .collect();
        Self {
            a,
            b,
            log: dim.log,
            mus,
            sigmas,
            masses,
            prior_only: n == 0,
        }
    }

    fn degenerate(&self) -> bool {
        !(self.b > self.a)
    }

    /// Density in internal space.
    fn pdf_internal(&self, u: f64) -> f64 {
        if u < self.a || u > self.b {
            return 0.0;
        }
        if self.prior_only {
            return 1.0 / (self.b - self.a);
        }
        let k = self.mus.len() as f64;
        self.mus
            .iter()
            .zip(&self.sigmas)
            .zip(&self.masses)
            .map(|((m, s), z)| {
                let t = (u - m) / s;
                (-0.5 * t * t).exp() / (s * (2.0 * PI).sqrt() * z)
            })
            .sum::<f64>()
            / k
    }

    /// Density with respect to `x` in natural units.
    pub fn pdf(&self, x: f64) -> f64 {
        if self.degenerate() {
            return f64::INFINITY;
        }
        if self.log {
            if x <= 0.0 {
                return 0.0;
            }
            self.pdf_internal(x.ln()) / x
        } else {
            self.pdf_internal(x)
        }
    }

    /// Sample in internal space by choosing a kernel, then rejecting draws
    /// that leave `[a, b]`.
    fn sample_internal(&self, rng: &mut SimRng) -> f64 {
        if self.degenerate() {
            return self.a;
        }
        if self.prior_only {
            return self.a + (self.b - self.a) * rng.random::<f64>();
        }
        let j = rng.random_range(0..self.mus.len());
        let normal = Normal::new(self.mus[j], self.sigmas[j]).expect("positive width");
        loop {
            let u = normal.sample(rng);
            if (self.a..=self.b).contains(&u) {
                return u;
            }
        }
    }
}

/// Density of the Parzen estimator built on `points`; the prior density
/// when `points` is empty.
pub fn parzen_pdf(points: &[f64], dim: &Dimension, x: f64) -> f64 {
    Parzen::new(points, dim).pdf(x)
}

/// Proposes the next parameters. Uses prior sampling until `n_startup`
/// trials are complete; pending and failed trials are ignored.
pub fn tpe_ask(study: &Study, space: &SearchSpace, cfg: &TpeConfig, rng: &mut SimRng) -> Params {
    if study.complete().count() < cfg.n_startup.max(2) {
        return space.sample_prior(rng);
    }
    let (good, bad) = tpe_split(study.trials(), cfg.gamma).expect("at least two complete trials");
    let mut out = Params::new();
    for dim in &space.dims {
        let pts = |set: &[&super::study::Trial]| -> Vec<f64> {
            set.iter().filter_map(|t| t.params.get(&dim.name).copied()).collect()
        };
        let l = Parzen::new(&pts(&good), dim);
        let g = Parzen::new(&pts(&bad), dim);
        if l.degenerate() {
            out.insert(dim.name.clone(), dim.bounds.lo);
            continue;
        }
        let mut best = (f64::NEG_INFINITY, l.a);
        for _ in 0..cfg.n_candidates {
            let u = l.sample_internal(rng);
            let score = l.pdf_internal(u).ln() - g.pdf_internal(u).ln();
            if score > best.0 {
                best = (score, u);
            }
        }
        out.insert(dim.name.clone(), dim.from_internal(best.1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn fy_dim() -> Dimension {
        Dimension::log_uniform("f_y", Bounds::new(1e2, 1e4))
    }

    fn ab_dim() -> Dimension {
        Dimension::uniform("alpha2", Bounds::new(0.2, 1.2))
    }

    /// Composite Simpson over `[lo, hi]`, in log space for log dimensions.
    fn integrate(p: &Parzen, dim: &Dimension) -> f64 {
        let n = 4000;
        let (a, b) = dim.internal_bounds();
        let h = (b - a) / n as f64;
        let f = |u: f64| {
            let x = if dim.log { u.exp() } else { u };
            p.pdf(x) * if dim.log { x } else { 1.0 }
        };
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn empty_points_give_prior_density() {
        let d = ab_dim();
        for x in [0.2, 0.45, 1.2] {
            assert!((parzen_pdf(&[], &d, x) - 1.0).abs() < 1e-12);
        }
        assert_eq!(parzen_pdf(&[], &d, 1.5), 0.0);
        let f = fy_dim();
        for x in [100.0, 777.0, 1e4] {
            let want = 1.0 / (x * 100f64.ln());
            assert!((parzen_pdf(&[], &f, x) - want).abs() < 1e-12 * want);
        }
    }

    #[test]
    fn single_midpoint_is_symmetric() {
        let d = ab_dim();
        let p = Parzen::new(&[0.7], &d);
        for off in [0.05, 0.2, 0.37, 0.49] {
            assert!((p.pdf(0.7 - off) - p.pdf(0.7 + off)).abs() < 1e-12);
        }
    }

    #[test]
    fn log_dimension_includes_jacobian() {
        let d = fy_dim();
        let p = Parzen::new(&[300.0, 1000.0, 5000.0], &d);
        assert!((integrate(&p, &d) - 1.0).abs() < 1e-3);
        let ab = ab_dim();
        let pts: Vec<f64> = (0..7).map(|i| 0.2 + 0.13 * i as f64).collect();
        let lin = Parzen::new(&pts, &ab);
        assert!((integrate(&lin, &ab) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn bandwidth_rule() {
        let d = ab_dim();
        let p = Parzen::new(&[0.5, 0.6, 1.0], &d);
        // floor is 1.0 / 4 = 0.25 for three points
        assert!((p.sigmas[0] - 0.3).abs() < 1e-12);
        assert!((p.sigmas[1] - 0.4).abs() < 1e-12);
        assert!((p.sigmas[2] - 0.4).abs() < 1e-12);
        assert_eq!(p.sigmas[3], 1.0);
        let many: Vec<f64> = (0..300).map(|i| 0.2 + i as f64 / 300.0).collect();
        let p = Parzen::new(&many, &d);
        assert!(p.sigmas[..300].iter().all(|s| (*s - 0.01).abs() < 1e-12));
    }

    #[test]
    fn startup_phase_matches_lander_prior_draws() {
        let priors = PriorSet::default();
        let space = SearchSpace::lander(&priors);
        let got = tpe_ask(&Study::new(), &space, &TpeConfig::default(), &mut rng_from_seed(11));
        let want = crate::lander::sample_design(&priors, &mut rng_from_seed(11));
        assert_eq!(got["f_y"], want.f_y);
        assert_eq!(got["beta"], want.beta);
        assert_eq!(got["alpha2"], want.alpha2);
    }

    fn clustered_history(f_star: f64, n: usize, seed: u64) -> Study {
        let space = SearchSpace::lander(&PriorSet::default());
        let mut rng = rng_from_seed(seed);
        let mut s = Study::new();
        for i in 0..n {
            let p = space.sample_prior(&mut rng);
            let v = (p["f_y"].ln() - f_star.ln()).abs();
            s.tell::<()>(p, Ok(v), i as f64, i as f64);
        }
        s
    }

    #[test]
    fn proposals_move_toward_good_cluster() {
        let f_star = 250.0;
        let space = SearchSpace::lander(&PriorSet::default());
        let study = clustered_history(f_star, 40, 3);
        let cfg = TpeConfig::default();
        let mut proposals: Vec<f64> = (0..200)
            .map(|i| tpe_ask(&study, &space, &cfg, &mut rng_from_seed(1000 + i))["f_y"])
            .collect();
        proposals.sort_by(f64::total_cmp);
        let median = proposals[100];
        let prior_median: f64 = 1e3;
        assert!((median.ln() - f_star.ln()).abs() < (prior_median.ln() - f_star.ln()).abs());
    }

    #[test]
    fn gamma_near_one_concentrates_on_observed_points() {
        let space = SearchSpace {
            dims: vec![ab_dim()],
        };
        let mut s = Study::new();
        for (i, x) in [0.3, 0.31, 0.32, 0.33].iter().enumerate() {
            s.tell::<()>(Params::from([("alpha2".to_string(), *x)]), Ok(i as f64), 0.0, 0.0);
        }
        let cfg = TpeConfig {
            n_startup: 2,
            gamma: 0.999,
            n_candidates: 24,
        };
        let near = (0..100)
            .filter(|i| (tpe_ask(&s, &space, &cfg, &mut rng_from_seed(*i))["alpha2"] - 0.315).abs() < 0.25)
            .count();
        assert!(near > 80, "{near}");
    }

    #[test]
    fn identical_inputs_identical_proposal() {
        let space = SearchSpace::lander(&PriorSet::default());
        let study = clustered_history(2000.0, 30, 8);
        let cfg = TpeConfig::default();
        let a = tpe_ask(&study, &space, &cfg, &mut rng_from_seed(5));
        let b = tpe_ask(&study, &space, &cfg, &mut rng_from_seed(5));
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn parzen_normalizes(pts in prop::collection::vec(0.0f64..1.0, 0..200), log in any::<bool>()) {
            let dim = if log { fy_dim() } else { ab_dim() };
            let (a, b) = dim.internal_bounds();
            let xs: Vec<f64> = pts.iter().map(|u| dim.from_internal(a + (b - a) * u)).collect();
            let p = Parzen::new(&xs, &dim);
            prop_assert!((integrate(&p, &dim) - 1.0).abs() < 1e-3);
        }

        #[test]
        fn proposals_stay_in_bounds(seed in any::<u64>()) {
            let priors = PriorSet::default();
            let space = SearchSpace::lander(&priors);
            let study = clustered_history(700.0, 15, seed);
            let p = tpe_ask(&study, &space, &TpeConfig::default(), &mut rng_from_seed(seed));
            prop_assert!(priors.f_y.contains(p["f_y"]));
            prop_assert!(priors.beta.contains(p["beta"]));
            prop_assert!(priors.alpha2.contains(p["alpha2"]));
        }
    }
}
