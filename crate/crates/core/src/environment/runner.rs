use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{draw_contexts, MarketScenario, SourcePolicy};
use super::{derive_seed, stream, Stream};
use crate::error::{Result, TjapError};
use crate::estimation::{EstimationConfig, Observation};
use crate::geometry::GateConfig;
use crate::mnl::{
    choice_probabilities, revenue, sample_choice, sample_choice_from_uniform, Assortment, ChoiceOutcome,
    ParamVector,
};
use crate::policy::{
    Action, AlgorithmKind, DecisionRule, EpisodicLearner, EstimatorKind, LearnerSpec, Policy,
};
use crate::pricing::{
    optimal_assortment_and_prices, LinearUtility, PriceGrid, PricedAssortment, UtilityCurve,
};

/// Learner-side settings shared by every algorithm in an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySettings {
    pub estimation: EstimationConfig,
    pub gate: GateConfig,
    pub grid_points: usize,
    pub chi2_weighting: bool,
}

impl Default for PolicySettings {
    fn default() -> Self {
        Self {
            estimation: EstimationConfig::default(),
            gate: GateConfig::default(),
            grid_points: crate::pricing::DEFAULT_GRID_POINTS,
            chi2_weighting: false,
        }
    }
}

/// One round of a simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretRecord {
    pub t: usize,
    pub action: Action,
    pub realized_revenue: f64,
    pub expected_revenue: f64,
    pub clairvoyant_revenue: f64,
    pub regret: f64,
    pub cum_regret: f64,
    pub forced: bool,
    pub episode: usize,
}

fn true_utilities(nu: &ParamVector, contexts: &[Vec<f64>], action: &Action) -> Vec<f64> {
    action
        .assortment
        .items()
        .iter()
        .zip(&action.prices)
        .map(|(&i, &p)| nu.utility(&contexts[i], p))
        .collect()
}

/// Best assortment and prices under the true target parameters.
pub fn clairvoyant_value(
    scenario: &MarketScenario,
    contexts: &[Vec<f64>],
    grid: &PriceGrid,
) -> Result<PricedAssortment> {
    let curves: Vec<LinearUtility> = contexts
        .iter()
        .map(|x| {
            let (a, b) = scenario.target.linear_utility(x);
            LinearUtility::new(a, b)
        })
        .collect();
    let dyn_curves: Vec<&dyn UtilityCurve> = curves.iter().map(|c| c as &dyn UtilityCurve).collect();
    optimal_assortment_and_prices(&dyn_curves, scenario.config.capacity, grid)
}

fn uniform_action(scenario: &MarketScenario, rng: &mut impl Rng) -> Action {
    let cfg = &scenario.config;
    let k = cfg.capacity.min(cfg.n_items);
    let mut items = sample(rng, cfg.n_items, k).into_vec();
    items.sort_unstable();
    let prices = (0..k).map(|_| rng.random::<f64>() * scenario.p_max).collect();
    Action {
        assortment: Assortment::new(items, cfg.n_items, cfg.capacity).expect("feasible by construction"),
        prices,
        forced: true,
    }
}

/// One uniform-policy round of source market `h` at time `t`.
pub fn source_step(
    scenario: &MarketScenario,
    h: usize,
    t: usize,
    contexts: &[Vec<f64>],
) -> Result<Observation> {
    if h == 0 || h > scenario.sources.len() {
        return Err(TjapError::Domain(format!("no source market {h}")));
    }
    let mut rng = stream(derive_seed(
        scenario.seed,
        &[Stream::Source as u64, h as u64, t as u64],
    ));
    let action = uniform_action(scenario, &mut rng);
    let probs = choice_probabilities(&true_utilities(scenario.params(h), contexts, &action));
    let outcome = sample_choice(&probs, &mut rng);
    Observation::new(h, t, action.assortment, action.prices, contexts, outcome)
}

/// Customer choice in the target market at round `t`. The uniform draw
/// depends only on `(seed, t)`, so every algorithm faces the same customers.
pub fn target_outcome(scenario: &MarketScenario, t: usize, probabilities: &[f64]) -> ChoiceOutcome {
    let mut rng = stream(derive_seed(
        scenario.seed,
        &[Stream::TargetOutcome as u64, t as u64],
    ));
    sample_choice_from_uniform(probabilities, rng.random::<f64>())
}

/// Benchmark policy that knows the true target parameters.
pub struct ClairvoyantPolicy {
    scenario: MarketScenario,
    grid: PriceGrid,
}

impl ClairvoyantPolicy {
    pub fn new(scenario: &MarketScenario, grid_points: usize) -> Result<Self> {
        Ok(Self {
            grid: PriceGrid::new(scenario.p_max, grid_points)?,
            scenario: scenario.clone(),
        })
    }
}

impl Policy for ClairvoyantPolicy {
    fn select_action(&mut self, _t: usize, contexts: &[Vec<f64>]) -> Result<Action> {
        let best = clairvoyant_value(&self.scenario, contexts, &self.grid)?;
        Ok(Action {
            assortment: Assortment::new(
                best.items,
                self.scenario.config.n_items,
                self.scenario.config.capacity,
            )?,
            prices: best.prices,
            forced: false,
        })
    }

    fn observe(&mut self, _t: usize, _target: &Observation, _sources: &[Observation]) -> Result<()> {
        Ok(())
    }

    fn episode(&self) -> usize {
        0
    }

    fn estimate(&self) -> Option<&ParamVector> {
        Some(&self.scenario.target)
    }
}

fn learner_spec(scenario: &MarketScenario, settings: &PolicySettings) -> LearnerSpec {
    let cfg = &scenario.config;
    LearnerSpec {
        d: cfg.d,
        n_items: cfg.n_items,
        capacity: cfg.capacity,
        sources: cfg.sources,
        p_max: scenario.p_max,
        l0: cfg.l0,
        c_min: Some(scenario.c_min),
        horizon: cfg.horizon,
        grid_points: settings.grid_points,
        chi2_weighting: settings.chi2_weighting,
    }
}

/// Instantiates a registered algorithm for `scenario`.
pub fn build_policy(
    algorithm: AlgorithmKind,
    scenario: &MarketScenario,
    settings: &PolicySettings,
    seed: u64,
) -> Result<Box<dyn Policy>> {
    match algorithm.components() {
        None => Ok(Box::new(ClairvoyantPolicy::new(scenario, settings.grid_points)?)),
        Some((estimator, rule)) => Ok(Box::new(EpisodicLearner::new(
            learner_spec(scenario, settings),
            estimator,
            rule,
            estimation_for(scenario, settings),
            settings.gate,
            seed,
        )?)),
    }
}

/// Estimation settings with the declared sparsity defaulting to the
/// scenario's.
fn estimation_for(scenario: &MarketScenario, settings: &PolicySettings) -> EstimationConfig {
    let mut est = settings.estimation.clone();
    est.s0 = est.s0.or(Some(scenario.config.s0));
    est
}

fn greedy_sources(scenario: &MarketScenario, settings: &PolicySettings) -> Result<Vec<EpisodicLearner>> {
    let spec = LearnerSpec {
        sources: 0,
        ..learner_spec(scenario, settings)
    };
    (1..=scenario.sources.len())
        .map(|h| {
            EpisodicLearner::new(
                spec.clone(),
                EstimatorKind::TargetOnly,
                DecisionRule::Optimistic,
                estimation_for(scenario, settings),
                settings.gate,
                derive_seed(scenario.seed, &[Stream::SourceLearner as u64, h as u64]),
            )
        })
        .collect()
}

/// Simulates `horizon` rounds of `policy` against `scenario` and records
/// expected-revenue regret against the clairvoyant benchmark.
pub fn run_policy(
    scenario: &MarketScenario,
    policy: &mut dyn Policy,
    horizon: usize,
    settings: &PolicySettings,
) -> Result<Vec<RegretRecord>> {
    let grid = PriceGrid::new(scenario.p_max, settings.grid_points)?;
    let mut greedy = match scenario.config.source_policy {
        SourcePolicy::Greedy => greedy_sources(scenario, settings)?,
        SourcePolicy::Uniform => Vec::new(),
    };
    let mut records = Vec::with_capacity(horizon);
    let mut cum = 0.0;
    for t in 1..=horizon {
        let round = |e| TjapError::Round {
            round: t,
            source: Box::new(e),
        };
        let contexts = draw_contexts(scenario, t);
        let action = policy.select_action(t, &contexts).map_err(round)?;
        let utilities = true_utilities(&scenario.target, &contexts, &action);
        let probs = choice_probabilities(&utilities);
        let outcome = target_outcome(scenario, t, &probs);
        let expected = revenue(&action.prices, &utilities);
        let realized = if outcome.slot == 0 {
            0.0
        } else {
            action.prices[outcome.slot - 1]
        };
        let best = clairvoyant_value(scenario, &contexts, &grid).map_err(round)?;
        let regret = best.value - expected;
        cum += regret;

        let sources = if greedy.is_empty() {
            (1..=scenario.sources.len())
                .map(|h| source_step(scenario, h, t, &contexts))
                .collect::<Result<Vec<_>>>()
                .map_err(round)?
        } else {
            let mut out = Vec::with_capacity(greedy.len());
            for (k, learner) in greedy.iter_mut().enumerate() {
                let h = k + 1;
                let a = learner.select_action(t, &contexts).map_err(round)?;
                let p = choice_probabilities(&true_utilities(scenario.params(h), &contexts, &a));
                let mut rng = stream(derive_seed(
                    scenario.seed,
                    &[Stream::Source as u64, h as u64, t as u64],
                ));
                let y = sample_choice(&p, &mut rng);
                let obs = Observation::new(h, t, a.assortment, a.prices, &contexts, y).map_err(round)?;
                learner.observe(t, &obs, &[]).map_err(round)?;
                out.push(obs);
            }
            out
        };

        let forced = action.forced;
        let episode = policy.episode();
        let target = Observation::new(
            0,
            t,
            action.assortment.clone(),
            action.prices.clone(),
            &contexts,
            outcome,
        )
        .map_err(round)?;
        policy.observe(t, &target, &sources).map_err(round)?;
        records.push(RegretRecord {
            t,
            action,
            realized_revenue: realized,
            expected_revenue: expected,
            clairvoyant_revenue: best.value,
            regret,
            cum_regret: cum,
            forced,
            episode,
        });
    }
    Ok(records)
}
