use nalgebra::DVector;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, stream, Stream};
use crate::error::{Result, TjapError};
use crate::linalg::dot;
use crate::mnl::{price_cap, ParamVector};

/// Mean of `min(|z|, 1)` for standard normal `z`.
pub const CLIPPED_HALF_NORMAL_MEAN: f64 = 0.631_253_619_627_492_8;
/// Variance of `min(|z|, 1)` for standard normal `z`.
pub const CLIPPED_HALF_NORMAL_VAR: f64 = 0.117_577_418_668_902;

/// Floor applied to source price sensitivities.
pub const GAMMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourcePolicy {
    /// Uniform-random assortments with uniform prices.
    #[default]
    Uniform,
    /// Each source runs its own target-only learner.
    Greedy,
}

/// How shift signs are drawn across source markets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShiftSigns {
    /// Fresh signs for each source.
    #[default]
    Independent,
    /// One sign per support coordinate, used by every source.
    Shared,
}

/// Generator inputs of a synthetic multi-market instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub d: usize,
    pub n_items: usize,
    pub capacity: usize,
    pub sources: usize,
    pub s0: usize,
    pub delta: f64,
    pub horizon: usize,
    /// Price-sensitivity floor enforced on every realized context.
    pub l0: f64,
    /// Bound on zero-price utilities; `None` means `d |theta|_inf`.
    pub max_utility: Option<f64>,
    /// Generation fails if the rescaled sensitivity vector grows beyond this.
    pub gamma_norm_cap: f64,
    pub source_policy: SourcePolicy,
    pub shift_signs: ShiftSigns,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            d: 10,
            n_items: 30,
            capacity: 5,
            sources: 0,
            s0: 2,
            delta: 0.1,
            horizon: 2000,
            l0: 0.3,
            max_utility: None,
            gamma_norm_cap: 10.0,
            source_policy: SourcePolicy::Uniform,
            shift_signs: ShiftSigns::Independent,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TjapError::Config(m));
        if self.d == 0 || self.n_items == 0 || self.capacity == 0 {
            return bad("d, n_items and capacity must be at least 1".into());
        }
        if self.s0 > 2 * self.d {
            return bad(format!("s0 = {} exceeds 2d = {}", self.s0, 2 * self.d));
        }
        if !(self.delta >= 0.0) {
            return bad(format!("delta must be nonnegative, got {}", self.delta));
        }
        if !(self.l0 > 0.0) {
            return bad(format!("l0 must be positive, got {}", self.l0));
        }
        if self.horizon < 2 * self.d + 2 {
            return bad(format!(
                "horizon {} is shorter than the warm-up plus two rounds ({})",
                self.horizon,
                2 * self.d + 2
            ));
        }
        if let Some(m) = self.max_utility {
            if !(m >= 0.0) {
                return bad(format!("max_utility must be nonnegative, got {m}"));
            }
        }
        Ok(())
    }
}

/// A generated instance: true parameters of every market plus the constants
/// published to learners.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketScenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub target: ParamVector,
    /// `sources[h - 1]` is market `h`.
    pub sources: Vec<ParamVector>,
    /// Raw shifts before the sensitivity floor.
    pub shifts: Vec<DVector<f64>>,
    /// Common shift support, sorted.
    pub support: Vec<usize>,
    pub max_utility: f64,
    pub p_max: f64,
    /// Covariance floor of augmented features under uniform exploration.
    pub c_min: f64,
}

impl MarketScenario {
    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn params(&self, market: usize) -> &ParamVector {
        if market == 0 {
            &self.target
        } else {
            &self.sources[market - 1]
        }
    }

    pub fn markets(&self) -> usize {
        1 + self.sources.len()
    }

    /// The same instance seen through its first `h` source markets. The
    /// target, contexts and price cap are unchanged.
    pub fn restrict_sources(&self, h: usize) -> Result<MarketScenario> {
        if h > self.sources.len() {
            return Err(TjapError::Domain(format!(
                "cannot keep {h} of {} source markets",
                self.sources.len()
            )));
        }
        let mut out = self.clone();
        out.sources.truncate(h);
        out.shifts.truncate(h);
        out.config.sources = h;
        if h == 0 {
            out.support.clear();
        }
        Ok(out)
    }
}

/// I.i.d. contexts of round `t`: `min(|z|, 1)` entrywise, shared by all markets.
pub fn draw_contexts(scenario: &MarketScenario, t: usize) -> Vec<Vec<f64>> {
    contexts_for(scenario.seed, &scenario.config, t)
}

fn contexts_for(seed: u64, cfg: &ScenarioConfig, t: usize) -> Vec<Vec<f64>> {
    let mut rng = stream(derive_seed(seed, &[Stream::Context as u64, t as u64]));
    (0..cfg.n_items)
        .map(|_| {
            (0..cfg.d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z.abs().min(1.0)
                })
                .collect()
        })
        .collect()
}

fn source_gamma(gamma0: &[f64], shift: &DVector<f64>, d: usize) -> Vec<f64> {
    gamma0
        .iter()
        .enumerate()
        .map(|(j, g)| (g + shift[d + j]).max(GAMMA_FLOOR))
        .collect()
}

/// Draws target parameters, common-support sparse shifts and the price cap.
///
/// Order of operations: draw `theta ~ N(0, I)` and `gamma ~ U(0.5, 1.5)`,
/// shrink the stacked vector into the unit ball, draw shifts, then scale
/// `gamma` up until every market meets the sensitivity floor on every
/// realized context of the horizon.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<MarketScenario> {
    config.validate()?;
    let d = config.d;
    let mut rng = stream(derive_seed(seed, &[Stream::Parameters as u64]));
    let theta: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut gamma: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
    let norm = (dot(&theta, &theta) + dot(&gamma, &gamma)).sqrt();
    let shrink = if norm > 1.0 { 1.0 / norm } else { 1.0 };
    let theta: Vec<f64> = theta.iter().map(|v| v * shrink).collect();
    gamma.iter_mut().for_each(|g| *g *= shrink);

    let mut support = if config.sources > 0 {
        sample(&mut rng, 2 * d, config.s0).into_vec()
    } else {
        Vec::new()
    };
    support.sort_unstable();
    let mut draw_shift = || {
        let mut s = DVector::zeros(2 * d);
        for &j in &support {
            s[j] = if rng.random::<bool>() {
                config.delta
            } else {
                -config.delta
            };
        }
        s
    };
    let shifts: Vec<DVector<f64>> = match config.shift_signs {
        ShiftSigns::Independent => (0..config.sources).map(|_| draw_shift()).collect(),
        ShiftSigns::Shared => {
            let common = draw_shift();
            vec![common; config.sources]
        }
    };

    let contexts: Vec<Vec<Vec<f64>>> = (1..=config.horizon)
        .map(|t| contexts_for(seed, config, t))
        .collect();
    let min_sensitivity = |gamma0: &[f64]| -> f64 {
        let mut gammas = vec![gamma0.to_vec()];
        gammas.extend(shifts.iter().map(|s| source_gamma(gamma0, s, d)));
        contexts
            .iter()
            .flatten()
            .flat_map(|x| gammas.iter().map(move |g| dot(x, g)))
            .fold(f64::INFINITY, f64::min)
    };
    const MAX_RESCALES: usize = 200;
    let mut feasible = false;
    for _ in 0..MAX_RESCALES {
        let low = min_sensitivity(&gamma);
        if low >= config.l0 {
            feasible = true;
            break;
        }
        let factor = if low > 0.0 {
            (config.l0 / low) * (1.0 + 1e-9)
        } else {
            2.0
        };
        gamma.iter_mut().for_each(|g| *g *= factor);
        let g_norm = dot(&gamma, &gamma).sqrt();
        if g_norm > config.gamma_norm_cap {
            return Err(TjapError::Generation(format!(
                "sensitivity floor {} needs |gamma| = {g_norm:.3} above the cap {}",
                config.l0, config.gamma_norm_cap
            )));
        }
    }
    if !feasible {
        return Err(TjapError::Generation(format!(
            "sensitivity floor {} not reached after {MAX_RESCALES} rescalings",
            config.l0
        )));
    }

    let target = ParamVector::from_parts(&theta, &gamma)?;
    let sources = shifts
        .iter()
        .map(|s| {
            let th: Vec<f64> = theta.iter().enumerate().map(|(j, v)| v + s[j]).collect();
            ParamVector::from_parts(&th, &source_gamma(&gamma, s, d))
        })
        .collect::<Result<Vec<_>>>()?;
    let max_utility = config
        .max_utility
        .unwrap_or_else(|| d as f64 * theta.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    let p_max = price_cap(max_utility, config.capacity, config.l0)?;
    Ok(MarketScenario {
        config: config.clone(),
        seed,
        target,
        sources,
        shifts,
        support,
        max_utility,
        p_max,
        c_min: augmented_covariance_floor(p_max),
    })
}

/// Smallest eigenvalue of the per-coordinate covariance of `(x_j, -p x_j)`
/// with `p ~ U(0, P)` scaled by the context variance:
/// `var_x * lambda_min([[1, -P/2], [-P/2, P^2/3]])`.
pub fn augmented_covariance_floor(p_max: f64) -> f64 {
    let (a, b, c) = (1.0, -p_max / 2.0, p_max * p_max / 3.0);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    CLIPPED_HALF_NORMAL_VAR * (mid - rad)
}
