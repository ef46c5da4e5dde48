//! Likelihood machinery and the aggregate-then-debias estimator.
//!
//! All objectives are per-observation means. The MNL log-likelihood is an
//! exponential family in `nu`, so its Hessian equals the expected Fisher
//! information and the smooth solver is a plain damped Newton method.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result, TjapError};
use crate::linalg::{dot, jacobi_eigenvalues, spd_solve};
use crate::mnl::{augment, Assortment, ChoiceOutcome, ParamVector, UTILITY_CLAMP};

/// One round of data from one market.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub market: usize,
    pub round: usize,
    pub assortment: Assortment,
    pub prices: Vec<f64>,
    /// Augmented features, one row of length `2d` per offered item.
    features: Vec<f64>,
    dim: usize,
    pub outcome: ChoiceOutcome,
}

impl Observation {
    /// Builds an observation from raw item covariates (`contexts[i]` for the
    /// `i`-th catalog item).
    pub fn new(
        market: usize,
        round: usize,
        assortment: Assortment,
        prices: Vec<f64>,
        contexts: &[Vec<f64>],
        outcome: ChoiceOutcome,
    ) -> Result<Self> {
        if prices.len() != assortment.len() {
            return domain("one price per offered item is required");
        }
        if outcome.slot > assortment.len() {
            return domain(format!(
                "outcome slot {} outside assortment of {}",
                outcome.slot,
                assortment.len()
            ));
        }
        let d = contexts.first().map(Vec::len).unwrap_or(0);
        let mut features = Vec::with_capacity(assortment.len() * 2 * d);
        for (&i, &p) in assortment.items().iter().zip(&prices) {
            let x = contexts
                .get(i)
                .ok_or_else(|| TjapError::Domain(format!("no context for item {i}")))?;
            features.extend(augment(x, p));
        }
        Ok(Self {
            market,
            round,
            assortment,
            prices,
            features,
            dim: 2 * d,
            outcome,
        })
    }

    /// Augmented feature of the `k`-th offered item.
    pub fn feature(&self, k: usize) -> &[f64] {
        &self.features[k * self.dim..(k + 1) * self.dim]
    }

    pub fn param_dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.assortment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assortment.is_empty()
    }

    /// Augmented features as a `|S| x 2d` matrix.
    pub fn feature_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.features)
    }

    /// Choice probabilities `(q_0, q_1, ...)` under `nu`.
    pub fn probabilities(&self, nu: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = (0..self.len()).map(|k| dot(self.feature(k), nu)).collect();
        crate::mnl::choice_probabilities(&v)
    }
}

/// Tuning constants for the estimators and the confidence radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub c_alpha: f64,
    pub c_lambda: f64,
    pub c_beta: f64,
    /// Ridge constant used both in the pooled MLE and in `W + lambda0 I`.
    pub lambda0: f64,
    /// Declared shift sparsity; `None` means `ceil(0.2 * 2d)`.
    pub s0: Option<usize>,
    /// Global failure budget; `None` means `T^-2`.
    pub eta_total: Option<f64>,
    pub newton_max_iters: usize,
    pub prox_max_iters: usize,
    pub tol: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            c_alpha: 0.005,
            c_lambda: 0.1,
            c_beta: 3e-4,
            lambda0: 30.0,
            s0: None,
            eta_total: None,
            newton_max_iters: 100,
            prox_max_iters: 20_000,
            tol: 1e-6,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_alpha", self.c_alpha),
            ("c_lambda", self.c_lambda),
            ("c_beta", self.c_beta),
            ("lambda0", self.lambda0),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(TjapError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(e) = self.eta_total {
            if !(e > 0.0) {
                return Err(TjapError::Config(format!("eta_total must be positive, got {e}")));
            }
        }
        if !(self.tol > 0.0 && self.tol <= 1e-3) {
            return Err(TjapError::Config(format!(
                "tol must lie in (0, 1e-3], got {}",
                self.tol
            )));
        }
        if self.newton_max_iters == 0 || self.prox_max_iters == 0 {
            return Err(TjapError::Config("iteration limits must be positive".into()));
        }
        Ok(())
    }

    /// Declared sparsity, defaulting to `ceil(0.2 * 2d)`.
    pub fn sparsity(&self, d: usize) -> usize {
        self.s0.unwrap_or_else(|| (0.4 * d as f64).ceil() as usize)
    }
}

/// Per-observation terms accumulated in a fixed order.
struct Accum {
    nll: f64,
    grad: DVector<f64>,
    fisher: Option<DMatrix<f64>>,
    weight: f64,
}

fn accumulate(
    data: &[Observation],
    nu: &[f64],
    weights: Option<&dyn Fn(&Observation) -> f64>,
    with_fisher: bool,
) -> Accum {
    let dim = nu.len();
    let mut acc = Accum {
        nll: 0.0,
        grad: DVector::zeros(dim),
        fisher: with_fisher.then(|| DMatrix::zeros(dim, dim)),
        weight: 0.0,
    };
    let mut util = Vec::new();
    let mut mean = vec![0.0; dim];
    for obs in data {
        let w = weights.map_or(1.0, |f| f(obs));
        if w == 0.0 {
            continue;
        }
        acc.weight += w;
        util.clear();
        util.extend((0..obs.len()).map(|k| dot(obs.feature(k), nu).clamp(-UTILITY_CLAMP, UTILITY_CLAMP)));
        let denom: f64 = 1.0 + util.iter().map(|&v| v.exp()).sum::<f64>();
        let log_denom = denom.ln();
        let chosen = obs.outcome.slot;
        let log_q = if chosen == 0 {
            -log_denom
        } else {
            util[chosen - 1] - log_denom
        };
        acc.nll -= w * log_q;

        mean.iter_mut().for_each(|m| *m = 0.0);
        for (k, &u) in util.iter().enumerate().take(obs.len()) {
            let q = u.exp() / denom;
            let x = obs.feature(k);
            let y = if chosen == k + 1 { 1.0 } else { 0.0 };
            for j in 0..dim {
                acc.grad[j] += w * (q - y) * x[j];
                mean[j] += q * x[j];
            }
            if let Some(f) = acc.fisher.as_mut() {
                for a in 0..dim {
                    let qa = w * q * x[a];
                    for b in 0..dim {
                        f[(a, b)] += qa * x[b];
                    }
                }
            }
        }
        if let Some(f) = acc.fisher.as_mut() {
            for a in 0..dim {
                for b in 0..dim {
                    f[(a, b)] -= w * mean[a] * mean[b];
                }
            }
        }
    }
    acc
}

fn check_data(data: &[Observation], nu: &[f64]) -> Result<()> {
    if data.is_empty() {
        return domain("no observations");
    }
    if let Some(o) = data.iter().find(|o| o.param_dim() != nu.len() && !o.is_empty()) {
        return domain(format!(
            "observation has feature dimension {}, parameter has {}",
            o.param_dim(),
            nu.len()
        ));
    }
    Ok(())
}

/// Mean negative log-likelihood and its gradient
/// `(1/n) sum_t sum_i x_i (q_i - y_i)`.
pub fn nll_and_gradient(data: &[Observation], nu: &ParamVector) -> Result<(f64, DVector<f64>)> {
    check_data(data, nu.as_slice())?;
    let acc = accumulate(data, nu.as_slice(), None, false);
    let n = data.len() as f64;
    Ok((acc.nll / n, acc.grad / n))
}

/// Mean Fisher information (equivalently the Hessian of the mean NLL).
pub fn mean_fisher(data: &[Observation], nu: &ParamVector) -> Result<DMatrix<f64>> {
    check_data(data, nu.as_slice())?;
    let acc = accumulate(data, nu.as_slice(), None, true);
    Ok(acc.fisher.unwrap_or_default() / data.len() as f64)
}

/// Smooth fit returned by [`aggregate_mle`].
#[derive(Debug, Clone)]
pub struct MleFit {
    pub estimate: ParamVector,
    pub iterations: usize,
    /// Objective value after each accepted step, starting at the warm start.
    pub objective_trace: Vec<f64>,
}

/// Largest norm allowed for a pooled estimate.
pub const ESTIMATE_NORM_CAP: f64 = 2.0;
const NEAR_SINGULAR: f64 = 1e-8;

/// Ridge-regularized pooled MLE over `data` with optional per-market weights.
///
/// Minimizes `sum_t w_t l_t(nu) / sum_t w_t + lambda0 |nu|^2 / (2n)` by
/// damped Newton steps on the Fisher matrix with Armijo backtracking, and
/// falls back to a gradient step when the curvature is nearly singular. The
/// result is projected onto the ball of radius [`ESTIMATE_NORM_CAP`].
pub fn aggregate_mle(
    data: &[Observation],
    warm_start: &ParamVector,
    config: &EstimationConfig,
    market_weights: Option<&[f64]>,
) -> Result<MleFit> {
    let dim = warm_start.as_slice().len();
    if data.len() < dim {
        return domain(format!(
            "pooled MLE needs at least {} observations, got {}",
            dim,
            data.len()
        ));
    }
    ridge_mle(data, warm_start, config, market_weights)
}

/// Same objective as [`aggregate_mle`] without the sample-size floor. The
/// ridge term keeps it well posed on short target-only episodes.
pub fn ridge_mle(
    data: &[Observation],
    warm_start: &ParamVector,
    config: &EstimationConfig,
    market_weights: Option<&[f64]>,
) -> Result<MleFit> {
    let dim = warm_start.as_slice().len();
    check_data(data, warm_start.as_slice())?;
    let weight_fn = market_weights.map(|w| {
        let w = w.to_vec();
        move |o: &Observation| w.get(o.market).copied().unwrap_or(0.0)
    });
    let weights: Option<&dyn Fn(&Observation) -> f64> = weight_fn.as_ref().map(|f| f as _);
    let ridge = config.lambda0 / (2.0 * data.len() as f64);

    let eval = |nu: &DVector<f64>, fisher: bool| -> Result<(f64, DVector<f64>, Option<DMatrix<f64>>)> {
        let acc = accumulate(data, nu.as_slice(), weights, fisher);
        if acc.weight <= 0.0 {
            return domain("all pooled observations carry zero weight");
        }
        let f = acc.nll / acc.weight + ridge * nu.norm_squared();
        let g = acc.grad / acc.weight + nu * (2.0 * ridge);
        let h = acc
            .fisher
            .map(|m| m / acc.weight + DMatrix::identity(dim, dim) * (2.0 * ridge));
        Ok((f, g, h))
    };

    let mut nu = warm_start.as_vector().clone();
    let (mut f, mut g, _) = eval(&nu, false)?;
    let mut trace = vec![f];
    let mut iterations = 0;
    while g.norm() > config.tol {
        if iterations == config.newton_max_iters {
            return Err(TjapError::Convergence {
                solver: "pooled Newton",
                iterations,
                residual: g.norm(),
                last_iterate: nu.as_slice().to_vec(),
            });
        }
        iterations += 1;
        let (_, _, h) = eval(&nu, true)?;
        let h = h.expect("fisher requested");
        let min_eig = jacobi_eigenvalues(&h, 1e-12)?.first().copied().unwrap_or(0.0);
        let dir = if min_eig < NEAR_SINGULAR {
            -&g
        } else {
            spd_solve(&h, &(-&g)).unwrap_or_else(|| -&g)
        };
        let slope = g.dot(&dir);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &nu + &dir * t;
            let (fc, gc, _) = eval(&cand, false)?;
            if fc <= f + 1e-4 * t * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, fc, gc)) => {
                nu = cand;
                f = fc;
                g = gc;
                trace.push(f);
            }
            // no decrease is representable any more: we are at the optimum up
            // to rounding
            None => break,
        }
    }
    let norm = nu.norm();
    if norm > ESTIMATE_NORM_CAP {
        nu *= ESTIMATE_NORM_CAP / norm;
    }
    Ok(MleFit {
        estimate: ParamVector::new(nu)?,
        iterations,
        objective_trace: trace,
    })
}

/// Sparse correction returned by [`debias_l1`].
#[derive(Debug, Clone)]
pub struct DebiasFit {
    pub delta: DVector<f64>,
    pub iterations: usize,
    /// Composite objective after each accepted step, starting at `delta = 0`.
    pub objective_trace: Vec<f64>,
    /// Norm of the proximal-gradient mapping at the returned point.
    pub mapping_norm: f64,
}

fn soft_threshold(v: &DVector<f64>, t: f64) -> DVector<f64> {
    v.map(|x| x.signum() * (x.abs() - t).max(0.0))
}

/// `l1`-penalized correction of `center` on target data:
/// `argmin_delta mean_nll(center + delta) + lambda |delta|_1`.
///
/// Accelerated proximal gradient with backtracking. Accepted iterates never
/// increase the composite objective: a momentum step that would is replaced
/// by the previous iterate and the momentum is restarted.
pub fn debias_l1(
    target: &[Observation],
    center: &ParamVector,
    lambda: f64,
    config: &EstimationConfig,
) -> Result<DebiasFit> {
    if !(lambda > 0.0) {
        return domain(format!("l1 penalty must be positive, got {lambda}"));
    }
    check_data(target, center.as_slice())?;
    let n = target.len() as f64;
    let c = center.as_vector();
    let smooth = |delta: &DVector<f64>| -> (f64, DVector<f64>) {
        let nu = c + delta;
        let acc = accumulate(target, nu.as_slice(), None, false);
        (acc.nll / n, acc.grad / n)
    };
    let smooth_value = |delta: &DVector<f64>| -> f64 {
        let nu = c + delta;
        accumulate(target, nu.as_slice(), None, false).nll / n
    };
    let composite = |f: f64, delta: &DVector<f64>| f + lambda * delta.lp_norm(1);

    let dim = c.len();
    let mut x = DVector::zeros(dim);
    let (f0, mut gx) = smooth(&x);
    let mut trace = vec![composite(f0, &x)];
    let mut y = x.clone();
    let mut momentum = 1.0_f64;
    let mut step = 1.0_f64;
    let mut iterations = 0;

    let mapping = |x: &DVector<f64>, g: &DVector<f64>, s: f64| -> f64 {
        ((x - soft_threshold(&(x - g * s), s * lambda)) / s).norm()
    };

    loop {
        let map_norm = mapping(&x, &gx, step);
        if map_norm <= config.tol {
            return Ok(DebiasFit {
                delta: x,
                iterations,
                objective_trace: trace,
                mapping_norm: map_norm,
            });
        }
        if iterations == config.prox_max_iters {
            return Err(TjapError::Convergence {
                solver: "l1 proximal gradient",
                iterations,
                residual: map_norm,
                last_iterate: x.as_slice().to_vec(),
            });
        }
        iterations += 1;

        let (fy, gy) = smooth(&y);
        // try a longer step first, then backtrack
        step *= 1.5;
        let mut z;
        loop {
            z = soft_threshold(&(&y - &gy * step), step * lambda);
            let diff = &z - &y;
            let fz = smooth_value(&z);
            if fz <= fy + gy.dot(&diff) + diff.norm_squared() / (2.0 * step) + 1e-15 * fy.abs() {
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                break;
            }
        }
        let (fz, gz) = smooth(&z);
        let obj_z = composite(fz, &z);
        let obj_x = *trace.last().expect("trace starts non-empty");
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        if obj_z <= obj_x {
            y = &z + (&z - &x) * ((momentum - 1.0) / next_momentum);
            x = z;
            gx = gz;
            trace.push(obj_z);
            momentum = next_momentum;
        } else {
            // restart from the last accepted point
            y = x.clone();
            momentum = 1.0;
        }
    }
}

/// `nu_ag + delta`.
pub fn combine_estimator(aggregate: &ParamVector, delta: &DVector<f64>) -> Result<ParamVector> {
    if aggregate.as_slice().len() != delta.len() {
        return domain("aggregate and correction dimensions differ");
    }
    ParamVector::new(aggregate.as_vector() + delta)
}

/// Per-episode failure budget `eta_m = 6 eta_total / (pi^2 m^2)`, which sums
/// to at most `eta_total` over all episodes.
pub fn failure_budget(episode: usize, eta_total: f64) -> f64 {
    let m = episode.max(1) as f64;
    6.0 * eta_total / (PI * PI * m * m)
}

/// Inputs of the episodic radius schedules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleInputs {
    pub d: usize,
    pub trace_w: f64,
    pub episode_len: usize,
    pub eta: f64,
    /// Curvature proxy for the restricted eigenvalue, before flooring.
    pub phi_sq: f64,
    pub s0: usize,
}

/// Variance radius, penalty level and transfer-bias radius of one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedules {
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    pub eta: f64,
}

/// Floor applied to the restricted-eigenvalue proxy.
pub const PHI_SQ_FLOOR: f64 = 1e-3;

/// Restricted-eigenvalue proxy `lambda_min(V_target) / |T|`, floored.
pub fn phi_sq_proxy(lambda_min_target: f64, episode_len: usize) -> f64 {
    (lambda_min_target / episode_len.max(1) as f64).max(PHI_SQ_FLOOR)
}

pub fn tuning_schedules(inputs: &ScheduleInputs, config: &EstimationConfig) -> Result<Schedules> {
    if inputs.episode_len == 0 {
        return domain("episode length must be at least 1");
    }
    if inputs.d == 0 || !(inputs.eta > 0.0) {
        return domain("schedules need d >= 1 and eta > 0");
    }
    let two_d = 2.0 * inputs.d as f64;
    let alpha = config.c_alpha
        * (two_d * (1.0 + inputs.trace_w / (two_d * config.lambda0)).ln() + (2.0 / inputs.eta).ln())
            .max(0.0)
            .sqrt();
    let lambda = config.c_lambda * ((two_d / inputs.eta).ln().max(0.0) / inputs.episode_len as f64).sqrt();
    let beta = config.c_beta * inputs.s0 as f64 * lambda / inputs.phi_sq.max(PHI_SQ_FLOOR);
    Ok(Schedules {
        alpha,
        lambda,
        beta,
        eta: inputs.eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(contexts: &[Vec<f64>], items: Vec<usize>, prices: Vec<f64>, slot: usize) -> Observation {
        let n = contexts.len();
        let k = items.len().max(1);
        Observation::new(
            0,
            1,
            Assortment::new(items, n, k).unwrap(),
            prices,
            contexts,
            ChoiceOutcome { slot },
        )
        .unwrap()
    }

    #[test]
    fn single_item_nll_is_log_two() {
        let ctx = vec![vec![1.0]];
        let zero = ParamVector::zeros(1);
        for slot in [0, 1] {
            let (f, _) = nll_and_gradient(&[obs(&ctx, vec![0], vec![1.0], slot)], &zero).unwrap();
            assert!((f - 2f64.ln()).abs() < 1e-15);
        }
        assert!(nll_and_gradient(&[], &zero).is_err());
    }

    #[test]
    fn combine_examples() {
        let ag = ParamVector::from_parts(&[0.1, 0.2], &[0.3, 0.4]).unwrap();
        let zero = DVector::zeros(4);
        assert_eq!(combine_estimator(&ag, &zero).unwrap(), ag);
        let delta = DVector::from_vec(vec![1.0, -1.0, 0.5, 0.0]);
        let z = ParamVector::zeros(2);
        assert_eq!(combine_estimator(&z, &delta).unwrap().into_vector(), delta);
        let sum = combine_estimator(&ag, &delta).unwrap();
        let expect: Vec<f64> = ag
            .as_slice()
            .iter()
            .zip(delta.iter())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(sum.as_slice(), expect.as_slice());
        assert!(combine_estimator(&ag, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn schedule_zero_information_edge() {
        let cfg = EstimationConfig {
            c_alpha: 1.0,
            c_lambda: 1.0,
            lambda0: 1.0,
            ..Default::default()
        };
        let s = tuning_schedules(
            &ScheduleInputs {
                d: 1,
                trace_w: 0.0,
                episode_len: 1,
                eta: 2.0,
                phi_sq: 1.0,
                s0: 0,
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(s.alpha, 0.0);
        assert_eq!(s.beta, 0.0);
    }

    #[test]
    fn schedule_unit_penalty() {
        let cfg = EstimationConfig {
            c_lambda: 1.0,
            ..Default::default()
        };
        // log(2d / eta) = 1 with d = 1
        let eta = 2.0 / std::f64::consts::E;
        let s = tuning_schedules(
            &ScheduleInputs {
                d: 1,
                trace_w: 0.0,
                episode_len: 1,
                eta,
                phi_sq: 1.0,
                s0: 1,
            },
            &cfg,
        )
        .unwrap();
        assert!((s.lambda - 1.0).abs() < 1e-14);
    }

    #[test]
    fn schedule_matches_direct_arithmetic() {
        let cfg = EstimationConfig {
            c_alpha: 1.0,
            lambda0: 1.0,
            ..Default::default()
        };
        let (d, t_total, m) = (10.0_f64, 2000.0_f64, 3.0_f64);
        let eta = 6.0 / (PI * PI * m * m * t_total * t_total);
        assert!((failure_budget(3, 1.0 / (t_total * t_total)) - eta).abs() < 1e-24);
        let s = tuning_schedules(
            &ScheduleInputs {
                d: 10,
                trace_w: 5000.0,
                episode_len: 4,
                eta,
                phi_sq: 1.0,
                s0: 0,
            },
            &cfg,
        )
        .unwrap();
        // 2d log(1 + 5000/20) + log(2/eta)
        let inner = 20.0 * (1.0 + 5000.0 / (2.0 * d)).ln() + (2.0 / eta).ln();
        assert!((s.alpha - inner.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn phi_sq_proxy_floors() {
        assert_eq!(phi_sq_proxy(0.0, 10), PHI_SQ_FLOOR);
        assert_eq!(phi_sq_proxy(5.0, 10), 0.5);
    }

    #[test]
    fn failure_budget_sums_below_total() {
        let total: f64 = (1..10_000).map(|m| failure_budget(m, 1e-6)).sum();
        assert!(total <= 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(EstimationConfig::default().validate().is_ok());
        let bad = EstimationConfig {
            tol: 0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EstimationConfig {
            c_beta: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(EstimationConfig::default().sparsity(10), 4);
    }
}
