use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tjap_core::environment::{
    build_policy, draw_contexts, generate_scenario, run_policy, source_step, target_outcome, MarketScenario,
    PolicySettings, ScenarioConfig,
};
use tjap_core::error::TjapError;
use tjap_core::estimation::{EstimationConfig, Observation};
use tjap_core::geometry::{
    fisher_increment, forced_exploration_length, lambda_schedule, pool_geometry, FisherMatrix, GateConfig,
};
use tjap_core::mnl::{augment, choice_probabilities, ParamVector};
use tjap_core::policy::{
    envelope, Action, AlgorithmKind, DecisionRule, EpisodicLearner, EstimatorKind, LearnerSpec, Policy,
};
use tjap_core::pricing::{brute_force_joint_oracle, UtilityCurve};

fn scenario(
    d: usize,
    n_items: usize,
    capacity: usize,
    sources: usize,
    horizon: usize,
    seed: u64,
) -> MarketScenario {
    let cfg = ScenarioConfig {
        d,
        n_items,
        capacity,
        sources,
        horizon,
        gamma_norm_cap: 50.0,
        ..Default::default()
    };
    generate_scenario(&cfg, seed).unwrap()
}

fn learner(sc: &MarketScenario, estimator: EstimatorKind, seed: u64) -> EpisodicLearner {
    let cfg = &sc.config;
    let spec = LearnerSpec {
        d: cfg.d,
        n_items: cfg.n_items,
        capacity: cfg.capacity,
        sources: cfg.sources,
        p_max: sc.p_max,
        l0: cfg.l0,
        c_min: Some(sc.c_min),
        horizon: cfg.horizon,
        grid_points: 256,
        chi2_weighting: false,
    };
    let est = EstimationConfig {
        s0: Some(cfg.s0),
        ..Default::default()
    };
    EpisodicLearner::new(
        spec,
        estimator,
        DecisionRule::Optimistic,
        est,
        GateConfig::default(),
        seed,
    )
    .unwrap()
}

/// Plays one round against the scenario and returns the target and source observations.
fn play(
    sc: &MarketScenario,
    t: usize,
    contexts: &[Vec<f64>],
    action: &Action,
) -> (Observation, Vec<Observation>) {
    let u: Vec<f64> = action
        .assortment
        .items()
        .iter()
        .zip(&action.prices)
        .map(|(&i, &p)| sc.target.utility(&contexts[i], p))
        .collect();
    let y = target_outcome(sc, t, &choice_probabilities(&u));
    let target = Observation::new(
        0,
        t,
        action.assortment.clone(),
        action.prices.clone(),
        contexts,
        y,
    )
    .unwrap();
    let sources = (1..=sc.sources.len())
        .map(|h| source_step(sc, h, t, contexts).unwrap())
        .collect();
    (target, sources)
}

fn increment(o: &Observation, nu: &ParamVector) -> FisherMatrix {
    let feats: Vec<&[f64]> = (0..o.len()).map(|k| o.feature(k)).collect();
    fisher_increment(&feats, nu.as_slice())
}

fn max_gap(a: &FisherMatrix, b: &FisherMatrix) -> f64 {
    (a.matrix() - b.matrix()).abs().max()
}

#[test]
fn rolling_information_and_frozen_geometry_match_a_replay() {
    let sc = scenario(3, 8, 3, 2, 300, 4);
    let mut pol = learner(&sc, EstimatorKind::Transfer, 1);
    let mut replay = vec![FisherMatrix::zeros(6); 3];
    let mut rollovers = 0;
    for t in 1..=300 {
        let contexts = draw_contexts(&sc, t);
        let action = pol.select_action(t, &contexts).unwrap();
        let (target, sources) = play(&sc, t, &contexts, &action);
        let before = pol.episode_state().map(|e| (e.estimate.clone(), e.end));
        pol.observe(t, &target, &sources).unwrap();
        let Some((nu, end)) = before else { continue };
        replay[0].add_assign(&increment(&target, &nu));
        for o in &sources {
            replay[o.market].add_assign(&increment(o, &nu));
        }
        if t == end {
            rollovers += 1;
            let (w, snapshot) = pol.last_rollover.as_ref().unwrap();
            assert!(max_gap(snapshot, &replay[0]) < 1e-12, "round {t}");
            let want = pool_geometry(&replay[0], &replay[1..], &[1.0, 1.0]).unwrap();
            assert!(max_gap(w, &want) < 1e-12, "round {t}");
            assert!(max_gap(&pol.episode_state().unwrap().geometry, w) == 0.0);
            assert!(pol.rolling().rolling.iter().all(|v| v.trace() == 0.0));
            replay.iter_mut().for_each(FisherMatrix::set_zero);
        } else {
            for (v, r) in pol.rolling().rolling.iter().zip(&replay) {
                assert!(max_gap(v, r) < 1e-12, "round {t}");
            }
        }
    }
    // episodes end at 8, 16, 32, 64, 128 and 256
    assert_eq!(rollovers, 6);
}

#[test]
fn warm_up_information_is_bounded_by_its_trace_budget() {
    let sc = scenario(4, 10, 3, 0, 64, 2);
    let mut pol = learner(&sc, EstimatorKind::TargetOnly, 3);
    let mut direct = 0.0;
    for t in 1..=pol.warm_up_rounds() {
        let contexts = draw_contexts(&sc, t);
        let action = pol.select_action(t, &contexts).unwrap();
        assert!(action.forced);
        for (&i, &p) in action.assortment.items().iter().zip(&action.prices) {
            direct += augment(&contexts[i], p).iter().map(|v| v * v).sum::<f64>() / 9.0;
        }
        let (target, _) = play(&sc, t, &contexts, &action);
        pol.observe(t, &target, &[]).unwrap();
    }
    let trace = pol.warm_up_gram().trace();
    assert!((trace - direct).abs() < 1e-10 * direct);
    // 2d rounds, K items each, |x|^2 <= d (1 + p_max^2), scaled by 1/K^2
    let bound = 8.0 * 3.0 * 4.0 * (1.0 + sc.p_max * sc.p_max) / 9.0;
    assert!(trace > 0.0 && trace <= bound, "{trace} > {bound}");
    assert!(pol.episode_state().is_some());
}

#[test]
fn envelope_matches_the_quadratic_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let g = rng.random_range(1..60);
        let mut prices: Vec<f64> = (0..g).map(|_| rng.random_range(0.0..10.0)).collect();
        prices.sort_by(f64::total_cmp);
        let bar: Vec<f64> = (0..g).map(|_| rng.random_range(-5.0..5.0)).collect();
        let l0 = rng.random_range(0.01..2.0);
        let got = envelope(&bar, &prices, l0).unwrap();
        for k in 0..g {
            let want = (0..=k)
                .map(|j| bar[j] - l0 * (prices[k] - prices[j]))
                .fold(f64::INFINITY, f64::min);
            assert!((got[k] - want).abs() < 1e-12);
            assert!(got[k] <= bar[k] + 1e-12);
            if k > 0 {
                assert!(got[k] <= got[k - 1] - l0 * (prices[k] - prices[k - 1]) + 1e-12);
            }
        }
    }
}

#[test]
fn optimistic_action_matches_brute_force_on_small_catalogs() {
    let mut checked = 0;
    for seed in 0..4 {
        let sc = scenario(2, 4, 2, 1, 64, seed);
        let mut pol = learner(&sc, EstimatorKind::Transfer, seed);
        for t in 1..=40 {
            let contexts = draw_contexts(&sc, t);
            let curves: Option<Vec<_>> = contexts.iter().map(|x| pol.optimistic_curve(x).ok()).collect();
            let action = pol.select_action(t, &contexts).unwrap();
            if let (Some(curves), false, true) = (curves, action.forced, t % 8 == 0) {
                let dyn_curves: Vec<&dyn UtilityCurve> =
                    curves.iter().map(|c| c as &dyn UtilityCurve).collect();
                let oracle = brute_force_joint_oracle(&dyn_curves, 2, sc.p_max, 0.005).unwrap();
                let u: Vec<f64> = action
                    .assortment
                    .items()
                    .iter()
                    .zip(&action.prices)
                    .map(|(&i, &p)| curves[i].eval(p))
                    .collect();
                let q = choice_probabilities(&u);
                let value: f64 = action.prices.iter().zip(&q[1..]).map(|(p, q)| p * q).sum();
                assert!(
                    value >= oracle.value * (1.0 - 2e-3),
                    "seed {seed} round {t}: {value} vs {}",
                    oracle.value
                );
                checked += 1;
            }
            let (target, sources) = play(&sc, t, &contexts, &action);
            pol.observe(t, &target, &sources).unwrap();
        }
    }
    assert!(checked >= 8);
}

#[test]
fn without_sources_every_estimator_takes_the_target_only_path() {
    let sc = scenario(3, 8, 3, 0, 200, 6);
    let settings = PolicySettings::default();
    let run = |kind| {
        let mut p = build_policy(kind, &sc, &settings, 77).unwrap();
        run_policy(&sc, p.as_mut(), 200, &settings).unwrap()
    };
    let base = run(AlgorithmKind::TargetOnly);
    for kind in [AlgorithmKind::Tjap, AlgorithmKind::Pool] {
        let other = run(kind);
        assert!(base
            .iter()
            .zip(&other)
            .all(|(a, b)| a.cum_regret == b.cum_regret && a.action == b.action));
    }
}

#[test]
fn forced_rounds_stay_polylogarithmic() {
    let horizon = 2048;
    let sc = scenario(3, 10, 3, 2, horizon, 8);
    let settings = PolicySettings::default();
    let mut p = build_policy(AlgorithmKind::Tjap, &sc, &settings, 5).unwrap();
    let records = run_policy(&sc, p.as_mut(), horizon, &settings).unwrap();
    let forced = records.iter().filter(|r| r.forced).count();
    let log_t = (horizon as f64).log2();
    assert!(forced as f64 <= 3.0 * log_t * log_t, "{forced} forced rounds");
    assert!(forced as f64 <= 0.05 * horizon as f64);
}

#[test]
fn uniform_exploration_reaches_the_gate_target_within_q_rounds() {
    // increments are PSD, so lambda_min only grows: reaching Lambda at
    // some t <= q is the same as holding it after q rounds
    let (d, k, episode_len, eta) = (3, 2, 256, 0.1);
    let gate = GateConfig::default();
    let mut hits = 0;
    for seed in 0..50 {
        let sc = scenario(d, 6, k, 0, 512, 1000 + seed);
        let big_lambda = lambda_schedule(gate.c_lambda_cap, sc.c_min, episode_len);
        let q = forced_exploration_length(big_lambda, gate.kappa, k, sc.c_min, d, sc.p_max, eta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = FisherMatrix::zeros(2 * d);
        let mut t = 0u64;
        while t < q {
            t += 1;
            let contexts = draw_contexts(&sc, (t as usize - 1) % 512 + 1);
            let feats: Vec<Vec<f64>> = sample(&mut rng, 6, k)
                .into_iter()
                .map(|i| augment(&contexts[i], rng.random::<f64>() * sc.p_max))
                .collect();
            let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
            v.add_assign(&fisher_increment(&refs, sc.target.as_slice()));
            if t.is_multiple_of(64) && v.min_eigenvalue().unwrap() >= big_lambda {
                hits += 1;
                break;
            }
        }
    }
    assert!(hits >= 45, "{hits} of 50");
}

#[test]
fn out_of_order_calls_are_sequencing_errors() {
    let sc = scenario(2, 4, 2, 0, 32, 1);
    let mut pol = learner(&sc, EstimatorKind::TargetOnly, 1);
    let contexts = draw_contexts(&sc, 1);
    assert!(matches!(
        pol.select_action(2, &contexts),
        Err(TjapError::Sequencing(_))
    ));
    let action = pol.select_action(1, &contexts).unwrap();
    assert!(matches!(
        pol.select_action(1, &contexts),
        Err(TjapError::Sequencing(_))
    ));
    let (target, _) = play(&sc, 1, &contexts, &action);
    assert!(matches!(
        pol.observe(2, &target, &[]),
        Err(TjapError::Sequencing(_))
    ));
    pol.observe(1, &target, &[]).unwrap();
}
