//! Policy interface for episode generation, plus the deterministic
//! scripted policy used for tests and golden fixtures.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which segment the engine is asking for.
///
/// Round 1 uses `Search`; later rounds run `Observation`, `SubAnswer`,
/// then `AnswerOrSearch`, where the policy picks the segment kind itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Observation,
    SubAnswer,
    Search,
    AnswerOrSearch,
}

/// One generation request. `context` is the canonical serialized trace
/// after any erasure, so retries condition on the truncated prefix.
#[derive(Debug, Clone)]
pub struct GenerateRequest<'a> {
    pub stage: Stage,
    pub round: usize,
    pub context: &'a str,
    pub attempt: u32,
    pub episode_nonce: &'a str,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    /// Unrecoverable: the episode aborts with a diagnostic.
    #[error("policy transport failure: {0}")]
    Transport(String),
    /// No scripted output for this slot.
    #[error("script has no entry for round {round} stage {stage:?}")]
    MissingSlot { round: usize, stage: Stage },
    /// Recoverable: counts as one failed attempt against the stage budget.
    #[error("malformed policy response: {0}")]
    Malformed(String),
}

pub trait Policy: Send + Sync {
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<String, PolicyError>;
}

/// One scripted slot: ordered alternatives for a (round, stage) pair.
/// Attempt i consumes alternative i; past the end, the last one repeats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptSlot {
    pub round: usize,
    pub stage: Stage,
    pub alternatives: Vec<String>,
}

/// Deterministic branch-table policy.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    slots: HashMap<(usize, Stage), Vec<String>>,
}

impl ScriptedPolicy {
    pub fn new(slots: impl IntoIterator<Item = ScriptSlot>) -> Self {
        Self {
            slots: slots
                .into_iter()
                .map(|s| ((s.round, s.stage), s.alternatives))
                .collect(),
        }
    }

    /// Load a script from a JSON array of slots.
    pub fn from_json(raw: &str) -> Result<Self, serde_json::Error> {
        let slots: Vec<ScriptSlot> = serde_json::from_str(raw)?;
        Ok(Self::new(slots))
    }

    pub fn from_path(path: &Path) -> Result<Self, std::io::Error> {
        let raw = fs::read_to_string(path)?;
        Self::from_json(&raw).map_err(std::io::Error::other)
    }
}

impl Policy for ScriptedPolicy {
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<String, PolicyError> {
        let alternatives = self
            .slots
            .get(&(request.round, request.stage))
            .filter(|a| !a.is_empty())
            .ok_or(PolicyError::MissingSlot {
                round: request.round,
                stage: request.stage,
            })?;
        let i = (request.attempt as usize).min(alternatives.len() - 1);
        Ok(alternatives[i].clone())
    }
}

/// Script construction shorthand used all over the tests.
pub fn slot(round: usize, stage: Stage, alternatives: &[&str]) -> ScriptSlot {
    ScriptSlot {
        round,
        stage,
        alternatives: alternatives.iter().map(|s| s.to_string()).collect(),
    }
}
