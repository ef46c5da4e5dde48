use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::environment::{derive_seed, PolicySettings, ScenarioConfig, ShiftSigns, SourcePolicy};
use crate::error::{Result, TjapError};
use crate::policy::AlgorithmKind;

/// One experiment grid: algorithms x source counts x repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d: usize,
    pub n_items: usize,
    pub capacity: usize,
    /// Source-market counts to sweep.
    pub sources: Vec<usize>,
    pub s0: usize,
    pub delta: f64,
    pub horizon: usize,
    pub l0: f64,
    pub max_utility: Option<f64>,
    pub gamma_norm_cap: f64,
    pub source_policy: SourcePolicy,
    pub shift_signs: ShiftSigns,
    pub algorithms: Vec<String>,
    pub repetitions: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub policy: PolicySettings,
    /// Worker threads; `None` uses every available core.
    pub parallelism: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scenario = ScenarioConfig::default();
        Self {
            d: scenario.d,
            n_items: scenario.n_items,
            capacity: scenario.capacity,
            sources: vec![0, 1, 3, 5],
            s0: scenario.s0,
            delta: scenario.delta,
            horizon: scenario.horizon,
            l0: scenario.l0,
            max_utility: scenario.max_utility,
            gamma_norm_cap: scenario.gamma_norm_cap,
            source_policy: scenario.source_policy,
            shift_signs: scenario.shift_signs,
            algorithms: ["tjap", "pool", "target_only", "topk_pricing"]
                .map(String::from)
                .to_vec(),
            repetitions: 10,
            master_seed: 20_240_601,
            output_dir: PathBuf::from("tjap-out"),
            policy: PolicySettings::default(),
            parallelism: None,
        }
    }
}

impl RunConfig {
    /// Parses and validates a JSON document. Syntax errors carry the line
    /// and column reported by the parser.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| TjapError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TjapError::Config(m));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.sources.is_empty() {
            return bad("sources must list at least one source count".into());
        }
        let mut seen = self.sources.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.sources.len() {
            return bad(format!("duplicate source counts in {:?}", self.sources));
        }
        if self.algorithms.is_empty() {
            return bad("algorithms must not be empty".into());
        }
        self.algorithm_kinds()?;
        self.scenario_config(self.max_sources()).validate()?;
        self.policy.estimation.validate()?;
        self.policy.gate.validate()?;
        if self.policy.grid_points < 2 {
            return bad(format!(
                "grid_points must be at least 2, got {}",
                self.policy.grid_points
            ));
        }
        if self.parallelism == Some(0) {
            return bad("parallelism must be at least 1".into());
        }
        Ok(())
    }

    pub fn algorithm_kinds(&self) -> Result<Vec<AlgorithmKind>> {
        let mut out = Vec::with_capacity(self.algorithms.len());
        for name in &self.algorithms {
            let kind = AlgorithmKind::parse(name).ok_or_else(|| {
                let known: Vec<&str> = AlgorithmKind::ALL.iter().map(|a| a.name()).collect();
                TjapError::Config(format!("unknown algorithm {name:?}; expected one of {known:?}"))
            })?;
            if out.contains(&kind) {
                return Err(TjapError::Config(format!("algorithm {name:?} listed twice")));
            }
            out.push(kind);
        }
        Ok(out)
    }

    pub fn max_sources(&self) -> usize {
        self.sources.iter().copied().max().unwrap_or(0)
    }

    pub fn scenario_config(&self, sources: usize) -> ScenarioConfig {
        ScenarioConfig {
            d: self.d,
            n_items: self.n_items,
            capacity: self.capacity,
            sources,
            s0: self.s0,
            delta: self.delta,
            horizon: self.horizon,
            l0: self.l0,
            max_utility: self.max_utility,
            gamma_norm_cap: self.gamma_norm_cap,
            source_policy: self.source_policy,
            shift_signs: self.shift_signs,
        }
    }
}

/// Seeds of one (algorithm, H, repetition) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    /// Shared by every algorithm and every H of the repetition.
    pub scenario: u64,
    /// Internal randomness of the algorithm.
    pub policy: u64,
}

const SCENARIO_TAG: u64 = 0x5343_454e;
const POLICY_TAG: u64 = 0x504f_4c49;

pub fn seed_derivation(master_seed: u64, algorithm: AlgorithmKind, h: usize, repetition: usize) -> RunSeeds {
    let alg = AlgorithmKind::ALL
        .iter()
        .position(|&a| a == algorithm)
        .expect("registered algorithm") as u64;
    RunSeeds {
        scenario: derive_seed(master_seed, &[SCENARIO_TAG, repetition as u64]),
        policy: derive_seed(master_seed, &[POLICY_TAG, alg, h as u64, repetition as u64]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn config_errors_name_the_line() {
        let err = RunConfig::from_json("{\n  \"d\": 4,\n  \"bogus\": 1\n}").unwrap_err();
        assert!(err.to_string().contains("line 3 column"), "{err}");
        let err = RunConfig::from_json("{\"algorithms\": [\"ucb\"]}").unwrap_err();
        assert!(matches!(err, TjapError::Config(_)));
        assert!(RunConfig::from_json("{\"repetitions\": 0}").is_err());
        assert!(RunConfig::from_json("{\"d\": 10, \"horizon\": 21}").is_err());
        assert!(RunConfig::from_json("{\"sources\": [1, 1]}").is_err());
    }

    #[test]
    fn seeds_follow_the_contract() {
        let a = seed_derivation(7, AlgorithmKind::Tjap, 3, 1);
        assert_eq!(a, seed_derivation(7, AlgorithmKind::Tjap, 3, 1));
        let b = seed_derivation(7, AlgorithmKind::Pool, 3, 1);
        assert_eq!(a.scenario, b.scenario);
        assert_ne!(a.policy, b.policy);
        assert_eq!(a.scenario, seed_derivation(7, AlgorithmKind::Tjap, 5, 1).scenario);
        assert_ne!(a.scenario, seed_derivation(7, AlgorithmKind::Tjap, 3, 2).scenario);
    }
}
