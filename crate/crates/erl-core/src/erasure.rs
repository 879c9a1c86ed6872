//! Erasure control: threshold decisions for the three erasure operators
//! and their application to a trace plus reward-state rollback.
//!
//! A failed first search resets the whole trajectory (plan erasure,
//! threshold `beta_plan`); a failed later search erases only that round's
//! query and evidence, keeping its observation and sub-answer; a failed
//! sub-answer erases the round back to the previous evidence. Retry
//! budgets bound each operator; once exhausted, the last attempt is kept
//! and the episode continues.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::RewardState;
use crate::trace::{SegmentKind, Trace};

#[derive(Debug, Error)]
pub enum ErasureError {
    #[error("stage {stage:?} is inconsistent with round {round}")]
    InconsistentStage { round: usize, stage: ErasureStage },
    #[error("decision is not an erasure")]
    NotAnErasure,
    #[error("trace is missing the segments to erase for {kind:?}")]
    MissingSegments { kind: ErasureKind },
    #[error("cannot roll back: no matching reward snapshot")]
    CannotRollBack,
}

/// Where in the round loop a reward was just scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErasureStage {
    AfterSearch,
    AfterSubAnswer,
}

/// Which operator fired. `None` means keep the segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErasureKind {
    None,
    ErasePlan,
    EraseSearch,
    EraseSubAnswer,
}

/// Thresholds and retry budgets. Search and sub-answer budgets are per
/// round; the plan budget is per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErasureConfig {
    /// threshold for local (search / sub-answer) errors
    pub alpha: f64,
    /// threshold for plan-level errors on the first search
    pub beta_plan: f64,
    pub max_retries_plan: u32,
    pub max_retries_search: u32,
    pub max_retries_sub_answer: u32,
}

impl Default for ErasureConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta_plan: 0.02,
            max_retries_plan: 3,
            max_retries_search: 3,
            max_retries_sub_answer: 3,
        }
    }
}

impl ErasureConfig {
    /// Thresholds below the minimum attainable rewards: nothing ever fires.
    pub fn never_firing() -> Self {
        Self {
            alpha: -2.0,
            beta_plan: -2.0,
            ..Self::default()
        }
    }
}

/// Attempts already consumed, per operator, at the decision point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttemptCounters {
    pub plan: u32,
    pub search: u32,
    pub sub_answer: u32,
}

/// The outcome of a threshold check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErasureDecision {
    pub kind: ErasureKind,
    pub trigger_value: f64,
    pub threshold_used: f64,
    /// true when the threshold was breached but the retry budget was spent
    pub budget_exhausted: bool,
}

impl ErasureDecision {
    pub fn fired(&self) -> bool {
        self.kind != ErasureKind::None
    }
}

/// One event in the per-episode erasure log (flat wire record).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureEvent {
    pub round: usize,
    pub kind: ErasureKind,
    pub trigger: f64,
    pub threshold: f64,
    pub attempt: u32,
    pub budget_exhausted: bool,
}

impl ErasureEvent {
    pub fn from_decision(round: usize, decision: &ErasureDecision, attempt: u32) -> Self {
        Self {
            round,
            kind: decision.kind,
            trigger: decision.trigger_value,
            threshold: decision.threshold_used,
            attempt,
            budget_exhausted: decision.budget_exhausted,
        }
    }
}

/// Pick the operator for a reward value at a decision point.
///
/// Round 1 has only the plan check (`beta_plan`); later rounds check
/// `alpha` after the sub-answer and after the search. A breached
/// threshold with no budget left yields `None` with `budget_exhausted`.
pub fn decide(
    round: usize,
    stage: ErasureStage,
    reward_value: f64,
    config: &ErasureConfig,
    attempts: &AttemptCounters,
) -> Result<ErasureDecision, ErasureError> {
    if round == 0 || (round == 1 && stage == ErasureStage::AfterSubAnswer) {
        return Err(ErasureError::InconsistentStage { round, stage });
    }
    let (kind, threshold, spent, budget) = match stage {
        ErasureStage::AfterSubAnswer => (
            ErasureKind::EraseSubAnswer,
            config.alpha,
            attempts.sub_answer,
            config.max_retries_sub_answer,
        ),
        ErasureStage::AfterSearch if round == 1 => (
            ErasureKind::ErasePlan,
            config.beta_plan,
            attempts.plan,
            config.max_retries_plan,
        ),
        ErasureStage::AfterSearch => (
            ErasureKind::EraseSearch,
            config.alpha,
            attempts.search,
            config.max_retries_search,
        ),
    };
    if reward_value > threshold {
        return Ok(ErasureDecision {
            kind: ErasureKind::None,
            trigger_value: reward_value,
            threshold_used: threshold,
            budget_exhausted: false,
        });
    }
    if spent >= budget {
        return Ok(ErasureDecision {
            kind: ErasureKind::None,
            trigger_value: reward_value,
            threshold_used: threshold,
            budget_exhausted: true,
        });
    }
    Ok(ErasureDecision {
        kind,
        trigger_value: reward_value,
        threshold_used: threshold,
        budget_exhausted: false,
    })
}

/// Apply a fired decision to the trajectory tail and roll the reward
/// state back to its matching checkpoint.
///
/// Plan erasure returns the question-only trace; search erasure cuts the
/// last round after its sub-answer; sub-answer erasure cuts back to the
/// previous round's evidence. The caller's snapshot discipline (one
/// checkpoint pushed before the erased generation) makes the rollback
/// exact.
pub fn apply(
    trace: &Trace,
    decision: &ErasureDecision,
    state: &mut RewardState,
) -> Result<Trace, ErasureError> {
    if !decision.fired() {
        return Err(ErasureError::NotAnErasure);
    }
    let rounds = trace.rounds();
    let truncated = match decision.kind {
        ErasureKind::None => unreachable!("checked above"),
        ErasureKind::ErasePlan => trace.truncated_to_question(),
        ErasureKind::EraseSearch => {
            let last = rounds.last().filter(|r| r.query.is_some());
            if last.is_none() || rounds.len() < 2 {
                return Err(ErasureError::MissingSegments {
                    kind: decision.kind,
                });
            }
            trace
                .truncated_after(rounds.len(), SegmentKind::SubAnswer)
                .ok_or(ErasureError::MissingSegments {
                    kind: decision.kind,
                })?
        }
        ErasureKind::EraseSubAnswer => {
            if rounds.len() < 2 || rounds.last().is_none_or(|r| r.observation.is_none()) {
                return Err(ErasureError::MissingSegments {
                    kind: decision.kind,
                });
            }
            trace
                .truncated_after(rounds.len() - 1, SegmentKind::Information)
                .ok_or(ErasureError::MissingSegments {
                    kind: decision.kind,
                })?
        }
    };
    state.restore().map_err(|_| ErasureError::CannotRollBack)?;
    Ok(truncated)
}
