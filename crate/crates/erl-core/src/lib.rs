//! Core library: TF-IDF retrieval, the tagged trace grammar, stepwise
//! rewards with rollback, erasure control, episode rollouts, evaluation
//! metrics, and a tabular PPO trainer over a synthetic multi-hop world.

pub mod erasure;
pub mod index;
pub mod metrics;
pub mod reward;
pub mod rollout;
pub mod trace;
pub mod trainer;

pub use erasure::{ErasureConfig, ErasureEvent, ErasureKind};
pub use index::{cosine_similarity, Document, SparseVector, TfIdfIndex};
pub use reward::{GoldTargets, RewardAnnotation, RewardKind, RewardState};
pub use rollout::{
    run_dataset, run_episode, EngineConfig, Episode, Policy, QAExample, ScriptedPolicy, Stage,
};
pub use trace::{SegmentKind, Span, Trace, TraceBuilder};
