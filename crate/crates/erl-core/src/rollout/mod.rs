//! Episode orchestration: drive a policy through the staged round loop,
//! retrieve evidence, score stepwise rewards, trigger erasure with
//! regeneration, and emit fully annotated episodes.
//!
//! Round 1 is a bare search. Every later round runs observation,
//! sub-answer (with a sub-answer erasure check), then either a new search
//! (with a search erasure check) or the final answer. A failed first
//! search resets the trajectory (plan erasure). Erasure truncates the
//! trace, rolls the reward state back to its checkpoint, and regenerates
//! by re-invoking the policy on the truncated context, bounded by retry
//! budgets.

mod policy;
mod protocol;

pub use policy::{slot, GenerateRequest, Policy, PolicyError, ScriptSlot, ScriptedPolicy, Stage};
pub use protocol::{ExternalClient, ExternalPolicy, ExternalRetriever, TransportError};

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::erasure::{
    self, AttemptCounters, ErasureConfig, ErasureEvent, ErasureKind, ErasureStage,
};
use crate::index::{Document, TfIdfIndex};
use crate::reward::{
    final_reward_set, GoldTargets, RetrievedDoc, RewardAnnotation, RewardError, RewardKind,
    RewardState,
};
use crate::trace::{format_information_block, SegmentKind, Span, Trace, TraceError};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("invalid example {id}: {reason}")]
    InvalidExample { id: String, reason: String },
    #[error("policy failure: {0}")]
    Policy(String),
    #[error("malformed policy output at round {round} {stage:?} after {attempts} attempts: {detail}")]
    MalformedOutput {
        round: usize,
        stage: Stage,
        attempts: u32,
        detail: String,
    },
    #[error(transparent)]
    Retriever(#[from] RetrieveError),
    #[error("reward: {0}")]
    Reward(#[from] RewardError),
    #[error("erasure: {0}")]
    Erasure(#[from] erasure::ErasureError),
    #[error("trace: {0}")]
    Trace(#[from] TraceError),
}

#[derive(Debug, Error)]
#[error("retriever failure: {0}")]
pub struct RetrieveError(pub String);

/// Document source for episodes: the local index or an external endpoint.
pub trait DocRetriever: Send + Sync {
    fn retrieve(
        &self,
        query: &str,
        k: usize,
        attempt: u32,
        nonce: &str,
    ) -> Result<Vec<Document>, RetrieveError>;
}

impl DocRetriever for TfIdfIndex {
    fn retrieve(
        &self,
        query: &str,
        k: usize,
        _attempt: u32,
        _nonce: &str,
    ) -> Result<Vec<Document>, RetrieveError> {
        Ok(TfIdfIndex::retrieve(self, query, k)
            .into_iter()
            .map(|(doc, _)| doc.clone())
            .collect())
    }
}

/// One training/evaluation example (JSON Lines wire format).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub golden_answers: Vec<String>,
    #[serde(default)]
    pub sub_answers: Vec<String>,
    #[serde(default)]
    pub evidence: Vec<String>,
}

impl QAExample {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        let fail = |reason: &str| EpisodeError::InvalidExample {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(fail("empty id"));
        }
        if self.question.trim().is_empty() {
            return Err(fail("empty question"));
        }
        if self
            .golden_answers
            .iter()
            .all(|a| a.trim().is_empty())
        {
            return Err(fail("no nonempty golden answer"));
        }
        Ok(())
    }
}

pub fn read_dataset_jsonl(reader: impl Read) -> Result<Vec<QAExample>, EpisodeError> {
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| EpisodeError::Policy(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: QAExample =
            serde_json::from_str(&line).map_err(|e| EpisodeError::InvalidExample {
                id: format!("line {}", i + 1),
                reason: e.to_string(),
            })?;
        examples.push(ex);
    }
    Ok(examples)
}

pub fn load_dataset(path: &Path) -> Result<Vec<QAExample>, EpisodeError> {
    let file = fs::File::open(path).map_err(|e| EpisodeError::InvalidExample {
        id: path.display().to_string(),
        reason: e.to_string(),
    })?;
    read_dataset_jsonl(file)
}

pub fn write_dataset_jsonl(
    examples: &[QAExample],
    mut writer: impl std::io::Write,
) -> std::io::Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut writer, ex)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Engine knobs. `top_k` defaults to 3, the depth that proved most
/// reliable; erasure thresholds and budgets live in `erasure`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub top_k: usize,
    pub max_rounds: usize,
    pub erasure_enabled: bool,
    pub erasure: ErasureConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            max_rounds: 8,
            erasure_enabled: true,
            erasure: ErasureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    Answer,
    RoundCap,
}

/// One generation attempt, kept or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub round: usize,
    pub stage: Stage,
    pub text: String,
    pub reward: Option<f64>,
}

/// A finished rollout with its reward annotations, retrieval-token mask,
/// erasure log, and every attempt that was made along the way.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Episode {
    pub example_id: String,
    pub trace: Trace,
    pub annotations: Vec<RewardAnnotation>,
    pub mask_spans: Vec<Span>,
    pub erasure_events: Vec<ErasureEvent>,
    pub attempt_log: Vec<AttemptRecord>,
    pub total_reward: f64,
    pub terminated_by: TerminatedBy,
}

impl Episode {
    /// Kept reward stream: annotations of the surviving segments.
    pub fn kept_annotations(&self) -> impl Iterator<Item = &RewardAnnotation> {
        self.annotations.iter().filter(|a| a.attempt == 0)
    }
}

#[derive(Clone, Copy)]
enum Budget {
    Plan,
    Search(usize),
    SubAnswer(usize),
}

struct EpisodeRunner<'a> {
    example: &'a QAExample,
    policy: &'a dyn Policy,
    config: &'a EngineConfig,
    index: &'a TfIdfIndex,
    retriever: &'a dyn DocRetriever,
    gold: GoldTargets,
    trace: Trace,
    state: RewardState,
    annotations: Vec<RewardAnnotation>,
    events: Vec<ErasureEvent>,
    attempt_log: Vec<AttemptRecord>,
    plan_attempts: u32,
    search_attempts: HashMap<usize, u32>,
    sub_attempts: HashMap<usize, u32>,
    nonce: String,
}

/// Run one full episode.
pub fn run_episode(
    example: &QAExample,
    policy: &dyn Policy,
    config: &EngineConfig,
    index: &TfIdfIndex,
    retriever: &dyn DocRetriever,
) -> Result<Episode, EpisodeError> {
    example.validate()?;
    let gold = GoldTargets::new(
        index,
        &example.evidence,
        &example.sub_answers,
        &example.golden_answers,
    )?;
    let state = RewardState::new(&gold);
    let runner = EpisodeRunner {
        example,
        policy,
        config,
        index,
        retriever,
        trace: Trace::new(example.question.clone()),
        state,
        gold,
        annotations: Vec::new(),
        events: Vec::new(),
        attempt_log: Vec::new(),
        plan_attempts: 0,
        search_attempts: HashMap::new(),
        sub_attempts: HashMap::new(),
        nonce: example.id.clone(),
    };
    runner.run()
}

impl<'a> EpisodeRunner<'a> {
    fn run(mut self) -> Result<Episode, EpisodeError> {
        self.first_round()?;
        let mut terminated_by = TerminatedBy::RoundCap;
        for round in 2..=self.config.max_rounds {
            self.observation_stage(round)?;
            if self.search_or_answer_stage(round)? {
                terminated_by = TerminatedBy::Answer;
                break;
            }
        }
        debug_assert_eq!(
            terminated_by == TerminatedBy::Answer,
            self.trace.final_answer().is_some()
        );
        let total_reward = self
            .annotations
            .iter()
            .filter(|ann| ann.attempt == 0)
            .map(|ann| ann.value)
            .sum();
        Ok(Episode {
            example_id: self.example.id.clone(),
            mask_spans: self.trace.mask_spans(),
            trace: self.trace,
            annotations: self.annotations,
            erasure_events: self.events,
            attempt_log: self.attempt_log,
            total_reward,
            terminated_by,
        })
    }

    fn attempts_for(&self, budget: Budget) -> u32 {
        match budget {
            Budget::Plan => self.plan_attempts,
            Budget::Search(round) => *self.search_attempts.get(&round).unwrap_or(&0),
            Budget::SubAnswer(round) => *self.sub_attempts.get(&round).unwrap_or(&0),
        }
    }

    fn bump(&mut self, budget: Budget) -> u32 {
        let slot = match budget {
            Budget::Plan => &mut self.plan_attempts,
            Budget::Search(round) => self.search_attempts.entry(round).or_insert(0),
            Budget::SubAnswer(round) => self.sub_attempts.entry(round).or_insert(0),
        };
        *slot += 1;
        *slot
    }

    fn budget_limit(&self, budget: Budget) -> u32 {
        let e = &self.config.erasure;
        match budget {
            Budget::Plan => e.max_retries_plan,
            Budget::Search(_) => e.max_retries_search,
            Budget::SubAnswer(_) => e.max_retries_sub_answer,
        }
    }

    fn counters(&self, round: usize) -> AttemptCounters {
        AttemptCounters {
            plan: self.plan_attempts,
            search: self.attempts_for(Budget::Search(round)),
            sub_answer: self.attempts_for(Budget::SubAnswer(round)),
        }
    }

    /// Generate until the policy produces exactly one segment of an
    /// expected kind. Failures consume the stage's retry budget.
    fn generate_valid(
        &mut self,
        stage: Stage,
        round: usize,
        expected: &[SegmentKind],
        budget: Budget,
    ) -> Result<(SegmentKind, String), EpisodeError> {
        loop {
            let attempt = self.attempts_for(budget);
            let context = self.trace.serialize();
            let request = GenerateRequest {
                stage,
                round,
                context: &context,
                attempt,
                episode_nonce: &self.nonce,
            };
            let failure = match self.policy.generate(&request) {
                Err(PolicyError::Transport(m)) => {
                    return Err(EpisodeError::Policy(format!("transport failure: {m}")))
                }
                Err(e @ PolicyError::MissingSlot { .. }) => {
                    return Err(EpisodeError::Policy(e.to_string()))
                }
                Err(PolicyError::Malformed(m)) => (String::new(), m),
                Ok(chunk) => match self.trace.append_partial(&chunk) {
                    Ok(appended)
                        if appended.segment_count() == self.trace.segment_count() + 1
                            && expected.contains(&appended.last_segment_kind().unwrap()) =>
                    {
                        let (_, seg) = appended.last_segment().unwrap();
                        let result = (seg.kind, seg.content.clone());
                        self.trace = appended;
                        return Ok(result);
                    }
                    Ok(_) => (
                        chunk,
                        format!("expected exactly one of {expected:?}"),
                    ),
                    Err(e) => (chunk, e.to_string()),
                },
            };
            let (text, detail) = failure;
            self.attempt_log.push(AttemptRecord {
                round,
                stage,
                text,
                reward: None,
            });
            let spent = self.bump(budget);
            if spent > self.budget_limit(budget) {
                return Err(EpisodeError::MalformedOutput {
                    round,
                    stage,
                    attempts: spent,
                    detail,
                });
            }
        }
    }

    fn retrieve_and_score(
        &mut self,
        round: usize,
        stage: Stage,
        query: &str,
        chunk_attempt: u32,
    ) -> Result<f64, EpisodeError> {
        let docs = self
            .retriever
            .retrieve(query, self.config.top_k, chunk_attempt, &self.nonce)?;
        let block = format_information_block(&docs);
        self.trace = self
            .trace
            .append(&format!("<information>{block}</information>"))?;
        let retrieved: Vec<RetrievedDoc> = docs
            .iter()
            .map(|d| RetrievedDoc::from_document(self.index, d))
            .collect();
        let reward = self.state.search_reward(&self.gold, &retrieved);
        self.attempt_log.push(AttemptRecord {
            round,
            stage,
            text: format!("<search>{query}</search>"),
            reward: Some(reward),
        });
        Ok(reward)
    }

    fn decide(
        &self,
        round: usize,
        stage: ErasureStage,
        reward: f64,
    ) -> Result<erasure::ErasureDecision, EpisodeError> {
        if !self.config.erasure_enabled {
            return Ok(erasure::ErasureDecision {
                kind: ErasureKind::None,
                trigger_value: reward,
                threshold_used: f64::NEG_INFINITY,
                budget_exhausted: false,
            });
        }
        Ok(erasure::decide(
            round,
            stage,
            reward,
            &self.config.erasure,
            &self.counters(round),
        )?)
    }

    fn search_annotation(&self, round: usize, value: f64, attempt: u32) -> RewardAnnotation {
        let anchor = self.trace.anchor_positions()[&(round, SegmentKind::Search)];
        RewardAnnotation {
            round,
            kind: RewardKind::Search,
            value,
            anchor,
            attempt,
            covered: None,
        }
    }

    fn sub_annotation(&self, round: usize, value: f64, attempt: u32) -> RewardAnnotation {
        let r = &self.trace.rounds()[round - 1];
        let obs = r.observation.as_ref().expect("observation present");
        let sub = r.sub_answer.as_ref().expect("sub_answer present");
        RewardAnnotation {
            round,
            kind: RewardKind::SubAnswer,
            value,
            anchor: sub.anchor,
            attempt,
            covered: Some(Span {
                start: obs.span.start,
                end: sub.span.end,
                maskable: false,
            }),
        }
    }

    /// Round 1: search only, plan-erasure check against `beta_plan`.
    fn first_round(&mut self) -> Result<(), EpisodeError> {
        loop {
            self.state.snapshot();
            let (_, query) =
                self.generate_valid(Stage::Search, 1, &[SegmentKind::Search], Budget::Plan)?;
            let attempt = self.plan_attempts;
            let reward = self.retrieve_and_score(1, Stage::Search, &query, attempt)?;
            let decision = self.decide(1, ErasureStage::AfterSearch, reward)?;
            if decision.fired() {
                self.events
                    .push(ErasureEvent::from_decision(1, &decision, attempt + 1));
                self.annotations
                    .push(self.search_annotation(1, reward, attempt + 1));
                self.trace = erasure::apply(&self.trace, &decision, &mut self.state)?;
                self.bump(Budget::Plan);
                continue;
            }
            if decision.budget_exhausted {
                self.events
                    .push(ErasureEvent::from_decision(1, &decision, attempt + 1));
            }
            self.state.discard_snapshot()?;
            self.annotations.push(self.search_annotation(1, reward, 0));
            return Ok(());
        }
    }

    /// Rounds >= 2: observation then sub-answer, with the sub-answer
    /// erasure check against `alpha`.
    fn observation_stage(&mut self, round: usize) -> Result<(), EpisodeError> {
        loop {
            self.state.snapshot();
            self.generate_valid(
                Stage::Observation,
                round,
                &[SegmentKind::Observation],
                Budget::SubAnswer(round),
            )?;
            let (_, sub_text) = self.generate_valid(
                Stage::SubAnswer,
                round,
                &[SegmentKind::SubAnswer],
                Budget::SubAnswer(round),
            )?;
            let reward = self.state.sub_answer_reward(&self.gold, &sub_text);
            self.attempt_log.push(AttemptRecord {
                round,
                stage: Stage::SubAnswer,
                text: format!("<sub_answer>{sub_text}</sub_answer>"),
                reward: Some(reward),
            });
            let attempt = self.attempts_for(Budget::SubAnswer(round));
            let decision = self.decide(round, ErasureStage::AfterSubAnswer, reward)?;
            if decision.fired() {
                self.events
                    .push(ErasureEvent::from_decision(round, &decision, attempt + 1));
                self.annotations
                    .push(self.sub_annotation(round, reward, attempt + 1));
                self.trace = erasure::apply(&self.trace, &decision, &mut self.state)?;
                self.bump(Budget::SubAnswer(round));
                continue;
            }
            if decision.budget_exhausted {
                self.events
                    .push(ErasureEvent::from_decision(round, &decision, attempt + 1));
            }
            self.state.discard_snapshot()?;
            self.annotations.push(self.sub_annotation(round, reward, 0));
            return Ok(());
        }
    }

    /// Rounds >= 2 after the sub-answer: the policy picks search or answer.
    /// Returns true when the episode terminated with an answer.
    fn search_or_answer_stage(&mut self, round: usize) -> Result<bool, EpisodeError> {
        loop {
            self.state.snapshot();
            let (kind, content) = self.generate_valid(
                Stage::AnswerOrSearch,
                round,
                &[SegmentKind::Search, SegmentKind::Answer],
                Budget::Search(round),
            )?;
            if kind == SegmentKind::Answer {
                self.state.discard_snapshot()?;
                let reward = final_reward_set(&content, &self.example.golden_answers);
                self.attempt_log.push(AttemptRecord {
                    round,
                    stage: Stage::AnswerOrSearch,
                    text: format!("<answer>{content}</answer>"),
                    reward: Some(reward),
                });
                let anchor =
                    self.trace.anchor_positions()[&(self.trace.rounds().len(), SegmentKind::Answer)];
                self.annotations.push(RewardAnnotation {
                    round,
                    kind: RewardKind::Answer,
                    value: reward,
                    anchor,
                    attempt: 0,
                    covered: None,
                });
                return Ok(true);
            }
            let attempt = self.attempts_for(Budget::Search(round));
            let reward = self.retrieve_and_score(round, Stage::AnswerOrSearch, &content, attempt)?;
            let decision = self.decide(round, ErasureStage::AfterSearch, reward)?;
            if decision.fired() {
                self.events
                    .push(ErasureEvent::from_decision(round, &decision, attempt + 1));
                self.annotations
                    .push(self.search_annotation(round, reward, attempt + 1));
                self.trace = erasure::apply(&self.trace, &decision, &mut self.state)?;
                self.bump(Budget::Search(round));
                continue;
            }
            if decision.budget_exhausted {
                self.events
                    .push(ErasureEvent::from_decision(round, &decision, attempt + 1));
            }
            self.state.discard_snapshot()?;
            self.annotations
                .push(self.search_annotation(round, reward, 0));
            return Ok(false);
        }
    }
}

/// Run every example through the engine, `parallelism` episodes at a time.
/// Output order matches input order; per-example failures are returned in
/// place without stopping the stream.
pub fn run_dataset(
    examples: &[QAExample],
    policy: &dyn Policy,
    config: &EngineConfig,
    index: &TfIdfIndex,
    retriever: &dyn DocRetriever,
    parallelism: usize,
) -> Vec<Result<Episode, EpisodeError>> {
    if parallelism <= 1 {
        return examples
            .iter()
            .map(|ex| run_episode(ex, policy, config, index, retriever))
            .collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .expect("thread pool");
    pool.install(|| {
        use rayon::prelude::*;
        examples
            .par_iter()
            .map(|ex| run_episode(ex, policy, config, index, retriever))
            .collect()
    })
}

/// Serialize episodes (or per-example errors) as JSON Lines.
pub fn write_episodes_jsonl(
    results: &[Result<Episode, EpisodeError>],
    mut writer: impl std::io::Write,
) -> std::io::Result<(usize, usize)> {
    let mut ok = 0;
    let mut failed = 0;
    for result in results {
        match result {
            Ok(ep) => {
                serde_json::to_writer(&mut writer, ep)?;
                ok += 1;
            }
            Err(e) => {
                let record = serde_json::json!({ "error": e.to_string() });
                serde_json::to_writer(&mut writer, &record)?;
                failed += 1;
            }
        }
        writer.write_all(b"\n")?;
    }
    Ok((ok, failed))
}

/// Parse episodes back from JSON Lines, skipping error records.
pub fn read_episodes_jsonl(reader: impl Read) -> Result<Vec<Episode>, EpisodeError> {
    let mut episodes = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| EpisodeError::Policy(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| EpisodeError::InvalidExample {
                id: format!("line {}", i + 1),
                reason: e.to_string(),
            })?;
        if value.get("error").is_some() {
            continue;
        }
        let ep: Episode =
            serde_json::from_value(value).map_err(|e| EpisodeError::InvalidExample {
                id: format!("line {}", i + 1),
                reason: e.to_string(),
            })?;
        episodes.push(ep);
    }
    Ok(episodes)
}
