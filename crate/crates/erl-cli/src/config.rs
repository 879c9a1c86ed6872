//! File-based run configuration: one TOML document mirroring the engine
//! and trainer configs, every field overridable by a flag. Precedence is
//! flag > file > built-in default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use erl_core::rollout::EngineConfig;
use erl_core::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let config: RunConfig = toml::from_str(&raw)
            .map_err(|e| anyhow::anyhow!("bad config {}: {e}", path.display()))?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Shared engine/erasure flag overrides.
#[derive(Debug, Clone, clap::Args)]
pub struct EngineOverrides {
    /// Retrieval depth per search
    #[arg(long, env = "ERL_TOP_K")]
    pub top_k: Option<usize>,
    /// Round cap per episode
    #[arg(long, env = "ERL_MAX_ROUNDS")]
    pub max_rounds: Option<usize>,
    /// Threshold for local (search / sub-answer) erasure
    #[arg(long, env = "ERL_ALPHA", allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    /// Threshold for plan erasure on the first search
    #[arg(long, env = "ERL_BETA_PLAN", allow_hyphen_values = true)]
    pub beta_plan: Option<f64>,
    /// Plan retry budget (per episode)
    #[arg(long, env = "ERL_RETRIES_PLAN")]
    pub retries_plan: Option<u32>,
    /// Search retry budget (per round)
    #[arg(long, env = "ERL_RETRIES_SEARCH")]
    pub retries_search: Option<u32>,
    /// Sub-answer retry budget (per round)
    #[arg(long, env = "ERL_RETRIES_SUB_ANSWER")]
    pub retries_sub_answer: Option<u32>,
}

impl EngineOverrides {
    pub fn apply_engine(&self, config: &mut EngineConfig) {
        if let Some(k) = self.top_k {
            config.top_k = k;
        }
        if let Some(r) = self.max_rounds {
            config.max_rounds = r;
        }
        apply_erasure(self, &mut config.erasure);
    }

    pub fn apply_train(&self, config: &mut TrainConfig) {
        if let Some(k) = self.top_k {
            config.top_k = k;
        }
        if let Some(r) = self.max_rounds {
            config.max_rounds = r;
        }
        apply_erasure(self, &mut config.erasure);
    }
}

fn apply_erasure(overrides: &EngineOverrides, erasure: &mut erl_core::ErasureConfig) {
    if let Some(a) = overrides.alpha {
        erasure.alpha = a;
    }
    if let Some(b) = overrides.beta_plan {
        erasure.beta_plan = b;
    }
    if let Some(n) = overrides.retries_plan {
        erasure.max_retries_plan = n;
    }
    if let Some(n) = overrides.retries_search {
        erasure.max_retries_search = n;
    }
    if let Some(n) = overrides.retries_sub_answer {
        erasure.max_retries_sub_answer = n;
    }
}
