//! Success rates under the in-distribution, shifted-scene and pretraining-task regimes.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::LabConfig;
use super::env::{pretrain_scenarios, rng_for, rollout, target_scenario, Policy, Scenario};
use super::model::{NetPolicy, NetSpec, PolicyNet};
use super::LabError;
use crate::tensorstore::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Id,
    OodVal,
    OodTest(usize),
    Generalist,
}

impl Regime {
    /// Stream id mixed into the evaluation seed, so regimes draw independent episodes.
    fn stream(self) -> u64 {
        match self {
            Regime::Id => 0x1d,
            Regime::OodVal => 0x7a1,
            Regime::OodTest(k) => 0x7e57_0000 + k as u64,
            Regime::Generalist => 0x6e7,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Id => write!(f, "id"),
            Regime::OodVal => write!(f, "ood_val"),
            Regime::OodTest(k) => write!(f, "ood_test_{k}"),
            Regime::Generalist => write!(f, "generalist"),
        }
    }
}

impl FromStr for Regime {
    type Err = LabError;

    /// Accepts `id`, `ood_val`, `ood_test_<k>` and `generalist`.
    fn from_str(s: &str) -> Result<Self, LabError> {
        match s {
            "id" => Ok(Regime::Id),
            "ood_val" => Ok(Regime::OodVal),
            "generalist" => Ok(Regime::Generalist),
            _ => s
                .strip_prefix("ood_test_")
                .and_then(|k| k.parse().ok())
                .map(Regime::OodTest)
                .ok_or_else(|| LabError::UnknownRegime(s.to_string())),
        }
    }
}

/// Episode distributions of a regime; episodes cycle through them in order.
pub fn regime_scenarios(cfg: &LabConfig, regime: Regime) -> Result<Vec<Scenario>, LabError> {
    let goal = cfg.target_goal();
    Ok(match regime {
        Regime::Id => vec![target_scenario(cfg)],
        Regime::OodVal => vec![Scenario::shifted(goal, &cfg.tasks.ood_val)],
        Regime::OodTest(k) => {
            let shift = cfg
                .tasks
                .ood_test
                .get(k)
                .ok_or_else(|| LabError::UnknownRegime(regime.to_string()))?;
            vec![Scenario::shifted(goal, shift)]
        }
        Regime::Generalist => pretrain_scenarios(cfg),
    })
}

/// Fraction of `episodes` rollouts that reach the goal. Episode `i` runs scenario
/// `i % len` with a generator seeded from `(seed, i)`, so the result does not depend
/// on scheduling.
pub fn success_rate<P: Policy + ?Sized>(
    cfg: &LabConfig,
    policy: &P,
    scenarios: &[Scenario],
    episodes: usize,
    seed: u64,
) -> f64 {
    if episodes == 0 || scenarios.is_empty() {
        return 0.0;
    }
    let successes: usize = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i as u64);
            let init = scenarios[i % scenarios.len()].sample(&cfg.env, &mut rng);
            usize::from(rollout(&cfg.env, policy, &init, &mut rng))
        })
        .sum();
    successes as f64 / episodes as f64
}

pub fn policy_from_checkpoint(cfg: &LabConfig, ckpt: &Checkpoint) -> Result<PolicyNet, LabError> {
    PolicyNet::from_checkpoint(NetSpec::for_env(&cfg.env, &cfg.model), ckpt)
}

pub fn evaluate_policy<P: Policy + ?Sized>(
    cfg: &LabConfig,
    policy: &P,
    regime: Regime,
    episodes: usize,
    seed: u64,
) -> Result<f64, LabError> {
    let scenarios = regime_scenarios(cfg, regime)?;
    Ok(success_rate(cfg, policy, &scenarios, episodes, rng_seed(seed, regime)))
}

fn rng_seed(seed: u64, regime: Regime) -> u64 {
    super::env::derive_seed(seed, regime.stream())
}

pub fn evaluate_regime(
    cfg: &LabConfig,
    policy: &Checkpoint,
    regime: Regime,
    episodes: usize,
    seed: u64,
) -> Result<f64, LabError> {
    let net = policy_from_checkpoint(cfg, policy)?;
    evaluate_policy(cfg, &NetPolicy { net: &net }, regime, episodes, seed)
}

/// Success rates of one policy in every regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub seed: u64,
    pub episodes: usize,
    pub id: f64,
    pub ood_val: f64,
    pub ood_test: Vec<f64>,
    pub generalist: f64,
}

impl EvalReport {
    pub fn ood_test_mean(&self) -> f64 {
        if self.ood_test.is_empty() {
            0.0
        } else {
            self.ood_test.iter().sum::<f64>() / self.ood_test.len() as f64
        }
    }

    pub fn get(&self, regime: Regime) -> Option<f64> {
        match regime {
            Regime::Id => Some(self.id),
            Regime::OodVal => Some(self.ood_val),
            Regime::OodTest(k) => self.ood_test.get(k).copied(),
            Regime::Generalist => Some(self.generalist),
        }
    }
}

pub fn evaluate_all<P: Policy + ?Sized>(
    cfg: &LabConfig,
    policy: &P,
    label: &str,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport, LabError> {
    if episodes == 0 {
        return Err(LabError::Config("episodes must be positive".into()));
    }
    let ood_test = (0..cfg.tasks.ood_test.len())
        .map(|k| evaluate_policy(cfg, policy, Regime::OodTest(k), episodes, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport {
        label: label.to_string(),
        seed,
        episodes,
        id: evaluate_policy(cfg, policy, Regime::Id, episodes, seed)?,
        ood_val: evaluate_policy(cfg, policy, Regime::OodVal, episodes, seed)?,
        ood_test,
        generalist: evaluate_policy(cfg, policy, Regime::Generalist, episodes, seed)?,
    })
}

/// Evaluates a policy checkpoint in every regime.
pub fn evaluate(cfg: &LabConfig, policy: &Checkpoint, label: &str, episodes: usize, seed: u64) -> Result<EvalReport, LabError> {
    let net = policy_from_checkpoint(cfg, policy)?;
    evaluate_all(cfg, &NetPolicy { net: &net }, label, episodes, seed)
}
