use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{envelope, Action, BonusGeometry, Policy};
use crate::error::{domain, Result, TjapError};
use crate::estimation::{
    aggregate_mle, combine_estimator, debias_l1, failure_budget, phi_sq_proxy, ridge_mle, tuning_schedules,
    EstimationConfig, Observation, ScheduleInputs, Schedules,
};
use crate::geometry::{
    chi2_mismatch, fisher_increment, forced_exploration_length, gate_is_open, lambda_schedule, market_weight,
    FisherMatrix, GateConfig, GeometryState, DEFAULT_C_MIN,
};
use crate::mnl::{Assortment, ParamVector};
use crate::pricing::{optimize_tables, single_item_optimal_price, GridUtility, PhiTable, PriceGrid};

/// How the episode estimate is formed from buffered data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    /// Pooled source MLE followed by an l1 correction on target data.
    Transfer,
    /// One MLE over target and source data together.
    Pool,
    /// Ridge MLE on target data; sources are ignored entirely.
    TargetOnly,
}

/// How actions are chosen from the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionRule {
    /// Optimistic joint assortment and pricing over enveloped utilities.
    Optimistic,
    /// Top-K by estimated zero-price utility, each priced on its own.
    TopKPricing,
}

/// Registered learning algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Tjap,
    Pool,
    TargetOnly,
    TopkPricing,
    Clairvoyant,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 5] = [
        AlgorithmKind::Tjap,
        AlgorithmKind::Pool,
        AlgorithmKind::TargetOnly,
        AlgorithmKind::TopkPricing,
        AlgorithmKind::Clairvoyant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::Tjap => "tjap",
            AlgorithmKind::Pool => "pool",
            AlgorithmKind::TargetOnly => "target_only",
            AlgorithmKind::TopkPricing => "topk_pricing",
            AlgorithmKind::Clairvoyant => "clairvoyant",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Estimator and decision rule of a learning algorithm; `None` for the
    /// clairvoyant benchmark.
    pub fn components(self) -> Option<(EstimatorKind, DecisionRule)> {
        match self {
            AlgorithmKind::Tjap => Some((EstimatorKind::Transfer, DecisionRule::Optimistic)),
            AlgorithmKind::Pool => Some((EstimatorKind::Pool, DecisionRule::Optimistic)),
            AlgorithmKind::TargetOnly => Some((EstimatorKind::TargetOnly, DecisionRule::Optimistic)),
            AlgorithmKind::TopkPricing => Some((EstimatorKind::TargetOnly, DecisionRule::TopKPricing)),
            AlgorithmKind::Clairvoyant => None,
        }
    }
}

/// Problem constants known to the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerSpec {
    pub d: usize,
    pub n_items: usize,
    pub capacity: usize,
    pub sources: usize,
    pub p_max: f64,
    pub l0: f64,
    pub c_min: Option<f64>,
    pub horizon: usize,
    pub grid_points: usize,
    /// Reweight sources by the binned covariate mismatch.
    pub chi2_weighting: bool,
}

/// Everything frozen for the duration of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub m: usize,
    /// First and last round of the episode (inclusive).
    pub start: usize,
    pub end: usize,
    pub estimate: ParamVector,
    pub geometry: FisherMatrix,
    pub schedules: Schedules,
    /// Forced-exploration length from the closed-form rule.
    pub q: u64,
    /// Window actually used by the gate after capping.
    pub q_effective: usize,
    bonus: BonusGeometry,
}

/// `tau_m = 2^(m-1)`.
fn episode_end(m: usize) -> usize {
    1usize << (m - 1)
}

/// Episode containing round `t`: the smallest `m` with `t <= 2^(m-1)`.
fn episode_of(t: usize) -> usize {
    let mut m = 1;
    while episode_end(m) < t {
        m += 1;
    }
    m
}

/// Episodic learner shared by the transfer algorithm and its baselines.
pub struct EpisodicLearner {
    spec: LearnerSpec,
    estimator: EstimatorKind,
    rule: DecisionRule,
    est: EstimationConfig,
    gate: GateConfig,
    grid: PriceGrid,
    rng: ChaCha8Rng,
    warm_gram: FisherMatrix,
    geometry: GeometryState,
    buffers: Vec<Vec<Observation>>,
    episode: Option<EpisodeState>,
    last_observed: usize,
    pending: Option<usize>,
    /// Last frozen geometry and rolling target snapshot, kept for inspection.
    pub last_rollover: Option<(FisherMatrix, FisherMatrix)>,
}

impl EpisodicLearner {
    pub fn new(
        spec: LearnerSpec,
        estimator: EstimatorKind,
        rule: DecisionRule,
        est: EstimationConfig,
        gate: GateConfig,
        seed: u64,
    ) -> Result<Self> {
        est.validate()?;
        gate.validate()?;
        if spec.d == 0 || spec.n_items == 0 || spec.capacity == 0 {
            return domain("learner needs d, N and K at least 1");
        }
        if !(spec.p_max > 0.0 && spec.l0 > 0.0) {
            return domain("learner needs a positive price cap and sensitivity floor");
        }
        let dim = 2 * spec.d;
        let sources = if estimator == EstimatorKind::TargetOnly {
            0
        } else {
            spec.sources
        };
        Ok(Self {
            grid: PriceGrid::new(spec.p_max, spec.grid_points)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            warm_gram: FisherMatrix::zeros(dim),
            geometry: GeometryState::new(dim, sources),
            buffers: vec![Vec::new(); sources + 1],
            episode: None,
            last_observed: 0,
            pending: None,
            last_rollover: None,
            spec,
            estimator,
            rule,
            est,
            gate,
        })
    }

    pub fn warm_up_rounds(&self) -> usize {
        2 * self.spec.d
    }

    pub fn episode_state(&self) -> Option<&EpisodeState> {
        self.episode.as_ref()
    }

    pub fn warm_up_gram(&self) -> &FisherMatrix {
        &self.warm_gram
    }

    pub fn rolling(&self) -> &GeometryState {
        &self.geometry
    }

    fn c_min(&self) -> f64 {
        self.gate.c_min.or(self.spec.c_min).unwrap_or(DEFAULT_C_MIN)
    }

    fn eta_total(&self) -> f64 {
        self.est
            .eta_total
            .unwrap_or_else(|| 1.0 / (self.spec.horizon.max(1) as f64).powi(2))
    }

    fn random_action(&mut self) -> Action {
        let k = self.spec.capacity.min(self.spec.n_items);
        let mut items = sample(&mut self.rng, self.spec.n_items, k).into_vec();
        items.sort_unstable();
        let prices = (0..k)
            .map(|_| self.rng.random::<f64>() * self.spec.p_max)
            .collect();
        Action {
            assortment: Assortment::new(items, self.spec.n_items, self.spec.capacity)
                .expect("sampled assortment is feasible"),
            prices,
            forced: true,
        }
    }

    /// Optimistic utility of one item on the price grid, after the envelope.
    pub fn optimistic_curve(&self, x: &[f64]) -> Result<GridUtility> {
        let ep = self
            .episode
            .as_ref()
            .ok_or_else(|| TjapError::Sequencing("no estimate before warm-up ends".into()))?;
        let (intercept, slope) = ep.estimate.linear_utility(x);
        let prices = self.grid.points();
        let bonus = ep.bonus.bonus_curve(x, prices);
        let bar_v: Vec<f64> = prices
            .iter()
            .zip(&bonus)
            .map(|(&p, b)| intercept - slope * p + b)
            .collect();
        GridUtility::new(&self.grid, envelope(&bar_v, prices, self.spec.l0)?)
    }

    fn optimistic_action(&self, contexts: &[Vec<f64>]) -> Result<Action> {
        let curves = contexts
            .iter()
            .map(|x| self.optimistic_curve(x))
            .collect::<Result<Vec<_>>>()?;
        let tables: Vec<PhiTable> = curves.iter().map(|c| PhiTable::new(c, &self.grid)).collect();
        let best = optimize_tables(&tables, self.spec.capacity, self.spec.p_max);
        Ok(Action {
            assortment: Assortment::new(best.items, self.spec.n_items, self.spec.capacity)?,
            prices: best.prices,
            forced: false,
        })
    }

    fn topk_action(&self, contexts: &[Vec<f64>]) -> Result<Action> {
        let ep = self
            .episode
            .as_ref()
            .ok_or_else(|| TjapError::Sequencing("no estimate before warm-up ends".into()))?;
        let lin: Vec<(f64, f64)> = contexts.iter().map(|x| ep.estimate.linear_utility(x)).collect();
        let mut order: Vec<usize> = (0..lin.len()).collect();
        order.sort_by(|&a, &b| lin[b].0.total_cmp(&lin[a].0).then(a.cmp(&b)));
        order.truncate(self.spec.capacity);
        order.sort_unstable();
        let prices = order
            .iter()
            .map(|&i| {
                let (a, b) = lin[i];
                single_item_optimal_price(a, b.max(self.spec.l0), self.spec.p_max).map(|r| r.0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Action {
            assortment: Assortment::new(order, self.spec.n_items, self.spec.capacity)?,
            prices,
            forced: false,
        })
    }

    fn market_weights(&self) -> Result<Vec<f64>> {
        let h = self.buffers.len() - 1;
        if !self.spec.chi2_weighting || h == 0 {
            return Ok(vec![1.0; h]);
        }
        let d = self.spec.d;
        let rows = |obs: &[Observation]| -> Vec<Vec<f64>> {
            obs.iter()
                .flat_map(|o| (0..o.len()).map(move |k| o.feature(k)[..d].to_vec()))
                .collect()
        };
        let target = rows(&self.buffers[0]);
        self.buffers[1..]
            .iter()
            .map(|b| {
                let src = rows(b);
                if target.is_empty() || src.is_empty() {
                    Ok(1.0)
                } else {
                    market_weight(chi2_mismatch(&target, &src)?)
                }
            })
            .collect()
    }

    /// Opens an episode that starts at `start` with the given estimate and
    /// frozen geometry.
    fn open_episode(
        &mut self,
        m: usize,
        start: usize,
        estimate: ParamVector,
        geometry: FisherMatrix,
        beta: f64,
        phi_sq: f64,
    ) -> Result<()> {
        let end = episode_end(m);
        let len = end + 1 - start;
        let eta = failure_budget(m, self.eta_total());
        let mut schedules = tuning_schedules(
            &ScheduleInputs {
                d: self.spec.d,
                trace_w: geometry.trace(),
                episode_len: len,
                eta,
                phi_sq,
                s0: self.est.sparsity(self.spec.d),
            },
            &self.est,
        )?;
        schedules.beta = beta;
        let c_min = self.c_min();
        let q = forced_exploration_length(
            lambda_schedule(self.gate.c_lambda_cap, c_min, len),
            self.gate.kappa,
            self.spec.capacity,
            c_min,
            self.spec.d,
            self.spec.p_max,
            eta,
        )?;
        let cap = (self.gate.forced_fraction_cap * len as f64).floor() as u64;
        let q_effective = q.min(cap) as usize;
        let bonus = BonusGeometry::new(&geometry, self.est.lambda0, schedules.alpha, schedules.beta)?;
        self.episode = Some(EpisodeState {
            m,
            start,
            end,
            estimate,
            geometry,
            schedules,
            q,
            q_effective,
            bonus,
        });
        Ok(())
    }

    fn finish_warm_up(&mut self) -> Result<()> {
        let target = std::mem::take(&mut self.buffers[0]);
        for b in &mut self.buffers {
            b.clear();
        }
        let zero = ParamVector::zeros(self.spec.d);
        let fit = ridge_mle(&target, &zero, &self.est, None).map_err(|e| TjapError::Episode {
            episode: 1,
            source: Box::new(e),
        })?;
        let start = self.warm_up_rounds() + 1;
        let m = episode_of(start);
        let geometry = self.warm_gram.clone();
        self.open_episode(m, start, fit.estimate, geometry, 0.0, 1.0)
    }

    fn rollover(&mut self) -> Result<()> {
        let ep = self
            .episode
            .as_ref()
            .ok_or_else(|| TjapError::Sequencing("rollover before warm-up ends".into()))?;
        let m = ep.m;
        let warm = ep.estimate.clone();
        let wrap = |e| TjapError::Episode {
            episode: m,
            source: Box::new(e),
        };
        let target = std::mem::take(&mut self.buffers[0]);
        if target.is_empty() {
            return Err(TjapError::Sequencing(format!(
                "episode {m} ended without target data"
            )));
        }
        let sources: Vec<Observation> = self.buffers[1..].iter_mut().flat_map(std::mem::take).collect();
        let episode_len = target.len();
        let lambda_min_target = self.geometry.target().min_eigenvalue().map_err(wrap)?;
        let phi_sq = phi_sq_proxy(lambda_min_target, episode_len);
        let eta = failure_budget(m, self.eta_total());
        let lambda = tuning_schedules(
            &ScheduleInputs {
                d: self.spec.d,
                trace_w: 0.0,
                episode_len,
                eta,
                phi_sq,
                s0: 0,
            },
            &self.est,
        )
        .map_err(wrap)?
        .lambda;

        let dim = 2 * self.spec.d;
        let (estimate, debiased) = match self.estimator {
            EstimatorKind::Transfer if sources.len() >= dim => {
                let weights = self.market_weights().map_err(wrap)?;
                let mut w = vec![1.0];
                w.extend(weights);
                let ag = aggregate_mle(&sources, &warm, &self.est, Some(&w)).map_err(wrap)?;
                let fit = debias_l1(&target, &ag.estimate, lambda, &self.est).map_err(wrap)?;
                (combine_estimator(&ag.estimate, &fit.delta).map_err(wrap)?, true)
            }
            EstimatorKind::Pool => {
                let mut all = target.clone();
                all.extend(sources);
                (
                    ridge_mle(&all, &warm, &self.est, None).map_err(wrap)?.estimate,
                    false,
                )
            }
            _ => (
                ridge_mle(&target, &warm, &self.est, None).map_err(wrap)?.estimate,
                false,
            ),
        };

        if self.spec.chi2_weighting && self.estimator == EstimatorKind::Transfer {
            self.geometry.weights = self.market_weights().map_err(wrap)?;
        }
        let snapshot = self.geometry.target().clone();
        let w = self.geometry.freeze().map_err(wrap)?.clone();
        self.last_rollover = Some((w.clone(), snapshot));
        let beta = if debiased {
            self.est.c_beta * self.est.sparsity(self.spec.d) as f64 * lambda / phi_sq
        } else {
            0.0
        };
        let start = episode_end(m) + 1;
        self.open_episode(m + 1, start, estimate, w, beta, phi_sq)
            .map_err(wrap)
    }

    fn ingest_warm_up(&mut self, target: &Observation) {
        let k = self.spec.capacity as f64;
        for i in 0..target.len() {
            self.warm_gram.add_outer(target.feature(i), 1.0 / (k * k));
        }
        self.buffers[0].push(target.clone());
    }
}

impl Policy for EpisodicLearner {
    fn select_action(&mut self, t: usize, contexts: &[Vec<f64>]) -> Result<Action> {
        if t != self.last_observed + 1 || self.pending.is_some() {
            return Err(TjapError::Sequencing(format!(
                "action requested for round {t} after round {}",
                self.last_observed
            )));
        }
        if contexts.len() != self.spec.n_items {
            return domain(format!(
                "expected {} contexts, got {}",
                self.spec.n_items,
                contexts.len()
            ));
        }
        self.pending = Some(t);
        if t <= self.warm_up_rounds() {
            return Ok(self.random_action());
        }
        let ep = self.episode.as_ref().expect("warm-up complete");
        let rounds_left = ep.end.saturating_sub(t);
        if ep.q_effective > 0
            && gate_is_open(
                self.geometry.target(),
                ep.q_effective as f64,
                self.gate.kappa,
                self.spec.capacity,
                self.c_min(),
                rounds_left,
            )?
        {
            return Ok(self.random_action());
        }
        match self.rule {
            DecisionRule::Optimistic => self.optimistic_action(contexts),
            DecisionRule::TopKPricing => self.topk_action(contexts),
        }
    }

    fn observe(&mut self, t: usize, target: &Observation, sources: &[Observation]) -> Result<()> {
        if self.pending != Some(t) || target.round != t {
            return Err(TjapError::Sequencing(format!(
                "observation for round {t} does not match the pending action"
            )));
        }
        self.pending = None;
        self.last_observed = t;
        if t <= self.warm_up_rounds() {
            self.ingest_warm_up(target);
            if t == self.warm_up_rounds() {
                self.finish_warm_up()?;
            }
            return Ok(());
        }
        let nu = self.episode.as_ref().expect("warm-up complete").estimate.clone();
        let nu = nu.as_slice();
        let inc = |o: &Observation| {
            let feats: Vec<&[f64]> = (0..o.len()).map(|k| o.feature(k)).collect();
            fisher_increment(&feats, nu)
        };
        self.geometry.add(0, &inc(target))?;
        self.buffers[0].push(target.clone());
        if self.buffers.len() > 1 {
            for o in sources {
                if o.market == 0 || o.market >= self.buffers.len() {
                    return domain(format!("source observation from unknown market {}", o.market));
                }
                self.geometry.add(o.market, &inc(o))?;
                self.buffers[o.market].push(o.clone());
            }
        }
        if t == self.episode.as_ref().expect("warm-up complete").end {
            self.rollover()?;
        }
        Ok(())
    }

    fn episode(&self) -> usize {
        self.episode.as_ref().map_or(0, |e| e.m)
    }

    fn estimate(&self) -> Option<&ParamVector> {
        self.episode.as_ref().map(|e| &e.estimate)
    }
}
