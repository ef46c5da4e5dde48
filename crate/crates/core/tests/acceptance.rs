//! Acceptance run. Prints one PASS/FAIL line per criterion and exits nonzero
//! when a criterion fails outside the documented gap.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tjap_core::environment::{build_policy, generate_scenario, run_policy, PolicySettings, ScenarioConfig};
use tjap_core::estimation::{nll_and_gradient, Observation};
use tjap_core::geometry::fisher_increment;
use tjap_core::harness::{
    parse_aggregate_csv, run_experiment, CellStatus, RunConfig, AGGREGATE_FILE, RUNS_DIR,
};
use tjap_core::mnl::{augment, choice_probabilities, price_cap, sample_choice, Assortment, ParamVector};
use tjap_core::policy::{envelope, AlgorithmKind};
use tjap_core::pricing::{
    brute_force_joint_oracle, optimal_assortment_and_prices, LinearUtility, PriceGrid, UtilityCurve,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=6);
        let k = rng.random_range(1..=3);
        // steep slopes keep the price cap near 1, so the cubic oracle stays cheap
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(2.5..4.0)).collect();
        let max_a = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_b = b.iter().copied().fold(f64::INFINITY, f64::min);
        let p_max = price_cap(max_a, k, min_b).unwrap();
        let curves: Vec<LinearUtility> = a
            .iter()
            .zip(&b)
            .map(|(&a, &b)| LinearUtility::new(a, b))
            .collect();
        let dyn_curves: Vec<&dyn UtilityCurve> = curves.iter().map(|c| c as &dyn UtilityCurve).collect();
        let fast =
            optimal_assortment_and_prices(&dyn_curves, k, &PriceGrid::new(p_max, 512).unwrap()).unwrap();
        let slow = brute_force_joint_oracle(&dyn_curves, k, p_max, 0.005).unwrap();
        worst = worst.max((fast.value - slow.value).abs() / slow.value);
    }
    outcome(worst < 2e-3, format!("max relative gap {worst:.2e} (< 2e-3)"))
}

fn random_observation(rng: &mut ChaCha8Rng, d: usize, nu: &ParamVector) -> Observation {
    let (n, k) = (8, rng.random_range(1..=4));
    let ctx: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut items = sample(rng, n, k).into_vec();
    items.sort_unstable();
    let prices: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..4.0)).collect();
    let u: Vec<f64> = items
        .iter()
        .zip(&prices)
        .map(|(&i, &p)| nu.utility(&ctx[i], p))
        .collect();
    let y = sample_choice(&choice_probabilities(&u), rng);
    Observation::new(0, 1, Assortment::new(items, n, k).unwrap(), prices, &ctx, y).unwrap()
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let d = rng.random_range(1..=5);
        let nu = ParamVector::new(
            (0..2 * d)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>()
                .into(),
        )
        .unwrap();
        let size = rng.random_range(1..=20);
        let data: Vec<Observation> = (0..size).map(|_| random_observation(&mut rng, d, &nu)).collect();
        let (_, g) = nll_and_gradient(&data, &nu).unwrap();
        let h = 1e-5;
        for j in 0..2 * d {
            let mut up = nu.as_vector().clone();
            let mut dn = nu.as_vector().clone();
            up[j] += h;
            dn[j] -= h;
            let f = |v| nll_and_gradient(&data, &ParamVector::new(v).unwrap()).unwrap().0;
            let fd = (f(up) - f(dn)) / (2.0 * h);
            worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1e-3));
        }
    }
    outcome(
        worst < 1e-5,
        format!("max relative component error {worst:.2e} (< 1e-5, floored at 1e-3)"),
    )
}

fn enumerated_fisher(features: &[&[f64]], nu: &[f64]) -> DMatrix<f64> {
    let dim = nu.len();
    let u: Vec<f64> = features
        .iter()
        .map(|x| x.iter().zip(nu).map(|(a, b)| a * b).sum())
        .collect();
    let q = choice_probabilities(&u);
    let mean: Vec<f64> = (0..dim)
        .map(|j| features.iter().zip(&q[1..]).map(|(x, qi)| x[j] * qi).sum())
        .collect();
    let mut out = DMatrix::zeros(dim, dim);
    for (slot, &prob) in q.iter().enumerate() {
        let score: Vec<f64> = (0..dim)
            .map(|j| if slot == 0 { 0.0 } else { features[slot - 1][j] } - mean[j])
            .collect();
        out += DMatrix::from_fn(dim, dim, |a, b| prob * score[a] * score[b]);
    }
    out
}

fn fisher_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 3;
    let feats: Vec<Vec<f64>> = (0..6)
        .map(|_| {
            augment(
                &(0..d).map(|_| rng.random::<f64>()).collect::<Vec<_>>(),
                rng.random_range(0.0..3.0),
            )
        })
        .collect();
    let nu: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (mut worst, mut count) = (0.0_f64, 0);
    for mask in 0u32..64 {
        if mask.count_ones() > 3 {
            continue;
        }
        let subset: Vec<&[f64]> = (0..6)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| feats[i].as_slice())
            .collect();
        let got = fisher_increment(&subset, &nu);
        worst = worst.max((got.matrix() - enumerated_fisher(&subset, &nu)).abs().max());
        count += 1;
    }
    outcome(
        worst < 1e-10,
        format!("{count} assortments, max entry error {worst:.2e} (< 1e-10)"),
    )
}

fn envelope_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..1000 {
        let g = rng.random_range(2..80);
        let mut prices: Vec<f64> = (0..g).map(|_| rng.random_range(0.0..10.0)).collect();
        prices.sort_by(f64::total_cmp);
        let bar: Vec<f64> = (0..g).map(|_| rng.random_range(-5.0..5.0)).collect();
        let l0 = rng.random_range(0.05..2.0);
        let e = envelope(&bar, &prices, l0).unwrap();
        for k in 0..g {
            let direct = (0..=k)
                .map(|j| bar[j] + l0 * prices[j])
                .fold(f64::INFINITY, f64::min)
                - l0 * prices[k];
            let tol = 1e-12 * (1.0 + bar[k].abs() + l0 * prices[k]);
            let mut ok = e[k] == direct && e[k] <= bar[k] + tol;
            if k > 0 {
                ok &= e[k] <= e[k - 1] && e[k - 1] - e[k] >= l0 * (prices[k] - prices[k - 1]) - tol;
            }
            violations += usize::from(!ok);
        }
    }
    outcome(
        violations == 0,
        format!("{violations} violations over 1000 grids"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    0.5 * (v[(n - 1) / 2] + v[n / 2])
}

fn estimation_rate() -> Outcome {
    let settings = PolicySettings::default();
    let horizon = 2048;
    let (mut h0, mut h5) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let cfg = ScenarioConfig {
            s0: 0,
            delta: 0.0,
            sources: 5,
            horizon,
            ..Default::default()
        };
        let full = generate_scenario(&cfg, 500 + seed).unwrap();
        for (h, errs) in [(0, &mut h0), (5, &mut h5)] {
            let sc = full.restrict_sources(h).unwrap();
            let mut p = build_policy(AlgorithmKind::Tjap, &sc, &settings, seed).unwrap();
            run_policy(&sc, p.as_mut(), horizon, &settings).unwrap();
            errs.push((p.estimate().unwrap().as_vector() - sc.target.as_vector()).norm());
        }
    }
    let (m0, m5) = (median(h0), median(h5));
    outcome(
        m5 < 0.8 * m0,
        format!(
            "median error H=5 {m5:.4} vs H=0 {m0:.4}, ratio {:.3} (< 0.8)",
            m5 / m0
        ),
    )
}

struct RegretRun {
    finals: BTreeMap<(String, usize), f64>,
    at_512: BTreeMap<(String, usize), f64>,
    max_forced: usize,
}

fn regret_run(dir: &Path) -> RegretRun {
    let cfg = RunConfig {
        s0: 2,
        delta: 0.2,
        horizon: 2048,
        sources: vec![0, 3, 5],
        algorithms: vec!["tjap".into(), "pool".into()],
        repetitions: 10,
        ..Default::default()
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let manifest = run_experiment(&cfg, dir, threads, None).unwrap();
    assert_eq!(manifest.failed_cells(), 0);
    let max_forced = manifest
        .cells
        .iter()
        .filter(|c| c.status == CellStatus::Ok)
        .filter_map(|c| c.forced_rounds)
        .max()
        .unwrap();
    let rows = parse_aggregate_csv(&fs::read_to_string(dir.join(AGGREGATE_FILE)).unwrap()).unwrap();
    let pick = |t: usize| {
        rows.iter()
            .filter(|r| r.t == t)
            .map(|r| ((r.algorithm.clone(), r.h), r.mean_cum_regret))
            .collect()
    };
    RegretRun {
        finals: pick(2048),
        at_512: pick(512),
        max_forced,
    }
}

fn regret_ordering(run: &RegretRun) -> (Outcome, bool) {
    let r = |alg: &str, h: usize| run.finals[&(alg.to_string(), h)];
    let by_h = r("tjap", 5) < r("tjap", 0);
    let vs_pool = [3, 5].map(|h| r("tjap", h) < r("pool", h));
    let detail = format!(
        "TJAP H=0/3/5 = {:.1}/{:.1}/{:.1}, Pool H=3/5 = {:.1}/{:.1}; TJAP(5) < TJAP(0): {by_h}; TJAP(H) < Pool(H) for H=3,5: {:?}",
        r("tjap", 0),
        r("tjap", 3),
        r("tjap", 5),
        r("pool", 3),
        r("pool", 5),
        vs_pool
    );
    (outcome(by_h && vs_pool.iter().all(|&b| b), detail), by_h)
}

fn sublinearity(run: &RegretRun) -> Outcome {
    let key = ("tjap".to_string(), 0);
    let (late, early) = (run.finals[&key] / 2048.0, run.at_512[&key] / 512.0);
    outcome(
        late < 0.6 * early,
        format!(
            "per-round regret {late:.4} at T=2048 vs {early:.4} at 512, ratio {:.3} (< 0.6)",
            late / early
        ),
    )
}

fn forced_budget(run: &RegretRun) -> Outcome {
    let cap = 0.05 * 2048.0;
    outcome(
        run.max_forced as f64 <= cap,
        format!("max forced rounds per run {} (<= {cap})", run.max_forced),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out: BTreeMap<String, Vec<u8>> = fs::read_dir(dir.join(RUNS_DIR))
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.insert(AGGREGATE_FILE.into(), fs::read(dir.join(AGGREGATE_FILE)).unwrap());
    out
}

fn determinism() -> Outcome {
    let cfg = RunConfig {
        d: 4,
        n_items: 8,
        capacity: 3,
        horizon: 256,
        sources: vec![0, 2],
        algorithms: AlgorithmKind::ALL.iter().map(|a| a.name().to_string()).collect(),
        repetitions: 2,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&cfg, a.path(), 1, None).unwrap();
    run_experiment(&cfg, b.path(), 2, None).unwrap();
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    outcome(sa == sb, format!("{} files compared byte for byte", sa.len()))
}

fn main() -> ExitCode {
    let mut unexpected = 0;
    let mut report = |name: &str, started: Instant, o: Outcome, gap_allowed: bool| {
        let tag = if o.pass {
            "PASS"
        } else if gap_allowed {
            "FAIL (documented gap)"
        } else {
            "FAIL"
        };
        println!(
            "{tag} {name}: {} [{:.1}s]",
            o.detail,
            started.elapsed().as_secs_f64()
        );
        if !o.pass && !gap_allowed {
            unexpected += 1;
        }
    };
    let t = Instant::now();
    report("oracle equivalence", t, oracle_equivalence(), false);
    let t = Instant::now();
    report("gradient correctness", t, gradient_correctness(), false);
    let t = Instant::now();
    report("fisher correctness", t, fisher_correctness(), false);
    let t = Instant::now();
    report("envelope properties", t, envelope_properties(), false);
    let t = Instant::now();
    report("estimation-rate trend", t, estimation_rate(), false);

    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let run = regret_run(dir.path());
    // only the comparison against Pool at equal H is a known gap; the
    // H=5 vs H=0 ordering must hold
    let (ordering, by_h) = regret_ordering(&run);
    report("regret ordering", t, ordering, by_h);
    let t = Instant::now();
    report("sublinearity", t, sublinearity(&run), false);
    report("forced-exploration budget", t, forced_budget(&run), false);
    let t = Instant::now();
    report("determinism", t, determinism(), false);

    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
