//! Desk-scale training demonstration: the tabular softmax policy learns
//! the synthetic multi-hop world with the clipped PPO surrogate, either
//! from the sparse final-answer reward alone (`ppo_sparse`) or from the
//! full dense-reward rollout with erasure (`erl`).

mod agent;
mod ppo;
mod world;

pub use agent::{DecisionRecord, TrainerPolicy, N_ACTIONS};
pub use ppo::{
    compute_gae, policy_gradient, ppo_update, surrogate_objective, AdvantageBatch, BatchEntry,
    PpoDiagnostics, SoftmaxPolicy,
};
pub use world::{make_world, question_start_entity, SyntheticWorld};

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::erasure::ErasureConfig;
use crate::index::TfIdfIndex;
use crate::metrics::evaluate_run;
use crate::reward::RewardKind;
use crate::rollout::{run_episode, EngineConfig, Episode, Stage};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("infeasible world parameters: {0}")]
    InfeasibleWorld(String),
    #[error("index: {0}")]
    Index(String),
    #[error("episode failed during training: {0}")]
    Episode(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite {0} in update")]
    NonFinite(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        /// checkpoints collected before the abort
        partial: Box<TrainReport>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    PpoSparse,
    Erl,
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ppo_sparse" => Ok(Algo::PpoSparse),
            "erl" => Ok(Algo::Erl),
            other => Err(format!("unknown algo {other:?}: expected ppo_sparse or erl")),
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algo::PpoSparse => "ppo_sparse",
            Algo::Erl => "erl",
        })
    }
}

/// Training knobs. The erasure thresholds default to values suited to the
/// synthetic world's similarity scale rather than the engine defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algo: Algo,
    pub clip_epsilon: f64,
    /// KL penalty against the frozen reference policy (distinct from the
    /// erasure threshold `beta_plan`)
    pub kl_coefficient: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    pub ppo_epochs: usize,
    pub seed: u64,
    pub top_k: usize,
    pub max_rounds: usize,
    pub erasure: ErasureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Erl,
            clip_epsilon: 0.2,
            kl_coefficient: 1e-3,
            gamma: 1.0,
            gae_lambda: 0.95,
            learning_rate: 0.05,
            iterations: 12,
            episodes_per_iteration: 12,
            ppo_epochs: 4,
            seed: 0,
            top_k: 1,
            max_rounds: 6,
            erasure: ErasureConfig {
                alpha: 0.1,
                beta_plan: 0.25,
                ..ErasureConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub mean_reward: f64,
    pub em: f64,
    pub clip_fraction: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub algo: Option<Algo>,
    pub seed: u64,
    pub curve: Vec<Checkpoint>,
    pub final_policy: SoftmaxPolicy,
}

impl TrainReport {
    pub fn final_em(&self) -> f64 {
        self.curve.last().map(|c| c.em).unwrap_or(0.0)
    }
}

fn engine_config(config: &TrainConfig, erasure_enabled: bool) -> EngineConfig {
    EngineConfig {
        top_k: config.top_k,
        max_rounds: config.max_rounds,
        erasure_enabled,
        erasure: config.erasure.clone(),
    }
}

/// Per-decision rewards for one episode, in decision order.
///
/// Each kept annotation maps back to the stage that produced it; the last
/// decision recorded for that (round, stage) slot is the kept one. With
/// `ppo_sparse` every intermediate reward is zeroed and only the final
/// answer reward remains.
fn episode_steps(
    episode: &Episode,
    records: &[DecisionRecord],
    algo: Algo,
) -> Result<Vec<(DecisionRecord, f64)>, TrainError> {
    let mut steps = Vec::new();
    for ann in episode.kept_annotations() {
        let stage = match ann.kind {
            RewardKind::Search if ann.round == 1 => Stage::Search,
            RewardKind::Search => Stage::AnswerOrSearch,
            RewardKind::SubAnswer => Stage::SubAnswer,
            RewardKind::Answer => Stage::AnswerOrSearch,
        };
        let record = records
            .iter()
            .rev()
            .find(|r| r.round == ann.round && r.stage == stage)
            .ok_or_else(|| {
                TrainError::Episode(format!(
                    "no decision recorded for round {} {:?}",
                    ann.round, ann.kind
                ))
            })?;
        let reward = match algo {
            Algo::Erl => ann.value,
            Algo::PpoSparse if ann.kind == RewardKind::Answer => ann.value,
            Algo::PpoSparse => 0.0,
        };
        steps.push((record.clone(), reward));
    }
    Ok(steps)
}

#[derive(Default)]
struct ValueTable {
    stats: BTreeMap<String, (f64, u64)>,
}

impl ValueTable {
    fn estimate(&self, key: &str) -> f64 {
        match self.stats.get(key) {
            Some((sum, n)) if *n > 0 => sum / *n as f64,
            _ => 0.0,
        }
    }

    fn record(&mut self, key: &str, observed_return: f64) {
        let slot = self.stats.entry(key.to_string()).or_insert((0.0, 0));
        slot.0 += observed_return;
        slot.1 += 1;
    }
}

/// Mean greedy EM over the dataset, erasure off.
pub fn evaluate_policy(
    world: &SyntheticWorld,
    index: &TfIdfIndex,
    table: &SoftmaxPolicy,
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let agent = TrainerPolicy::greedy(world, table.clone());
    let engine = engine_config(config, false);
    let mut episodes = Vec::new();
    for example in &world.dataset {
        let ep = run_episode(example, &agent, &engine, index, index)
            .map_err(|e| TrainError::Episode(e.to_string()))?;
        agent.take_records();
        episodes.push(ep);
    }
    let report =
        evaluate_run(&episodes, &world.dataset).map_err(|e| TrainError::Episode(e.to_string()))?;
    Ok(report.mean_em)
}

/// Train a fresh policy on the world.
pub fn train(world: &SyntheticWorld, config: &TrainConfig) -> Result<TrainReport, TrainError> {
    let index =
        TfIdfIndex::build(world.corpus.iter().cloned()).map_err(|e| TrainError::Index(e.to_string()))?;
    let mut policy = SoftmaxPolicy::new();
    let reference = policy.clone();
    let mut values = ValueTable::default();
    let mut master_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport {
        algo: Some(config.algo),
        seed: config.seed,
        curve: Vec::new(),
        final_policy: policy.clone(),
    };
    let erasure_on = config.algo == Algo::Erl;
    let engine = engine_config(config, erasure_on);

    for iteration in 0..config.iterations {
        let agent = TrainerPolicy::sampling(world, policy.clone(), master_rng.next_u64());
        let mut entries = Vec::new();
        let mut reward_sum = 0.0;
        let mut observed_returns = Vec::new();
        for e in 0..config.episodes_per_iteration {
            let example = &world.dataset[e % world.dataset.len()];
            let episode = run_episode(example, &agent, &engine, &index, &index)
                .map_err(|err| TrainError::Episode(err.to_string()))?;
            let records = agent.take_records();
            let steps = episode_steps(&episode, &records, config.algo)?;
            let rewards: Vec<f64> = steps.iter().map(|(_, r)| *r).collect();
            let mut value_seq: Vec<f64> =
                steps.iter().map(|(rec, _)| values.estimate(&rec.key)).collect();
            value_seq.push(0.0); // terminal
            let (advantages, returns) =
                compute_gae(&rewards, &value_seq, config.gamma, config.gae_lambda)?;
            reward_sum += rewards.iter().sum::<f64>();
            for (((record, _), advantage), ret) in
                steps.iter().zip(&advantages).zip(&returns)
            {
                entries.push(BatchEntry {
                    key: record.key.clone(),
                    n_actions: record.n_actions,
                    action: record.action,
                    old_log_prob: record.log_prob,
                    reward_to_go: *ret,
                    advantage: *advantage,
                    masked: false,
                });
                observed_returns.push((record.key.clone(), *ret));
            }
        }
        for (key, ret) in observed_returns {
            values.record(&key, ret);
        }
        let batch = AdvantageBatch { entries };
        let mut diag = PpoDiagnostics {
            objective: 0.0,
            mean_ratio: 1.0,
            clip_fraction: 0.0,
            mean_kl: 0.0,
        };
        for _ in 0..config.ppo_epochs {
            diag = ppo_update(
                &mut policy,
                &reference,
                &batch,
                config.clip_epsilon,
                config.kl_coefficient,
                config.learning_rate,
            )
            .map_err(|e| match e {
                TrainError::NonFinite(what) => TrainError::Diverged {
                    iteration,
                    reason: format!("non-finite {what}"),
                    partial: Box::new(report.clone()),
                },
                other => other,
            })?;
        }
        let em = evaluate_policy(world, &index, &policy, config)?;
        report.curve.push(Checkpoint {
            iteration,
            mean_reward: reward_sum / config.episodes_per_iteration.max(1) as f64,
            em,
            clip_fraction: diag.clip_fraction,
            kl: diag.mean_kl,
        });
        report.final_policy = policy.clone();
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub erl_em: f64,
    pub ppo_sparse_em: f64,
}

/// Train both algorithms on the same world per seed.
pub fn compare_algorithms(
    hop_depth: usize,
    n_entities: usize,
    base_config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<SeedComparison>, TrainError> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let world = make_world(seed, hop_depth, n_entities)?;
        let mut erl_cfg = base_config.clone();
        erl_cfg.algo = Algo::Erl;
        erl_cfg.seed = seed;
        let mut sparse_cfg = base_config.clone();
        sparse_cfg.algo = Algo::PpoSparse;
        sparse_cfg.seed = seed;
        let erl = train(&world, &erl_cfg)?;
        let sparse = train(&world, &sparse_cfg)?;
        out.push(SeedComparison {
            seed,
            erl_em: erl.final_em(),
            ppo_sparse_em: sparse.final_em(),
        });
    }
    Ok(out)
}
