//! Stepwise rewards over cumulative episode state.
//!
//! Three signals: a search reward (coverage gain over gold evidence minus
//! a redundancy penalty against the retrieval history), a sub-answer
//! reward (best improvement in token F1 against any gold sub-answer,
//! normalized by the gold count), and a final answer reward (mean of EM
//! and F1). State snapshots support exact rollback for erasure.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{cosine_similarity, Document, SparseVector, TfIdfIndex};
use crate::metrics::{exact_match, token_f1_single};
use crate::trace::{SegmentKind, Span, Trace};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("no checkpoint to restore")]
    NoCheckpoint,
    #[error("no anchor for round {round} {kind:?}")]
    MissingAnchor { round: usize, kind: RewardKind },
    #[error("gold answer must be nonempty")]
    EmptyGoldAnswer,
}

/// Which trace segment a reward value is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Search,
    SubAnswer,
    Answer,
}

/// Gold supervision for one example: evidence documents with their index
/// vectors, gold sub-answers, and the set of acceptable final answers.
///
/// Empty evidence or sub-answer lists are legal and degrade the matching
/// rewards to zero (evaluation-only mode).
#[derive(Debug, Clone)]
pub struct GoldTargets {
    gold_docs: Vec<(Document, SparseVector)>,
    gold_sub_answers: Vec<String>,
    gold_answers: Vec<String>,
}

impl GoldTargets {
    pub fn new(
        index: &TfIdfIndex,
        evidence_texts: &[String],
        sub_answers: &[String],
        answers: &[String],
    ) -> Result<Self, RewardError> {
        if answers.is_empty() || answers.iter().all(|a| a.trim().is_empty()) {
            return Err(RewardError::EmptyGoldAnswer);
        }
        let gold_docs = evidence_texts
            .iter()
            .map(|text| {
                let doc = Document::from_text("", text.clone());
                let vec = index.vectorize(&doc.text);
                (doc, vec)
            })
            .collect();
        Ok(Self {
            gold_docs,
            gold_sub_answers: sub_answers.to_vec(),
            gold_answers: answers.to_vec(),
        })
    }

    /// Number of gold evidence documents (n).
    pub fn evidence_count(&self) -> usize {
        self.gold_docs.len()
    }

    /// Number of gold sub-answers (m).
    pub fn sub_answer_count(&self) -> usize {
        self.gold_sub_answers.len()
    }

    pub fn gold_docs(&self) -> &[(Document, SparseVector)] {
        &self.gold_docs
    }

    pub fn sub_answers(&self) -> &[String] {
        &self.gold_sub_answers
    }

    pub fn answers(&self) -> &[String] {
        &self.gold_answers
    }
}

/// A retrieved document reduced to what the search reward needs:
/// an identity for history membership and a vector for similarity.
#[derive(Debug, Clone)]
pub struct RetrievedDoc {
    pub doc_id: String,
    pub vector: SparseVector,
}

impl RetrievedDoc {
    pub fn from_document(index: &TfIdfIndex, doc: &Document) -> Self {
        Self {
            doc_id: doc.doc_id.clone(),
            vector: index.vectorize(&doc.text),
        }
    }
}

/// Cumulative reward state for one episode.
///
/// `coverage` tracks the best similarity achieved per gold document,
/// `history` the ids of everything retrieved, and `best_f1` the best
/// token F1 per gold sub-answer. All three are non-decreasing across
/// kept rounds; snapshots restore them exactly on erasure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardState {
    coverage: Vec<f64>,
    history: BTreeSet<String>,
    best_f1: Vec<f64>,
    round_counter: u32,
    #[serde(skip)]
    snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone, PartialEq)]
struct Snapshot {
    coverage: Vec<f64>,
    history: BTreeSet<String>,
    best_f1: Vec<f64>,
    round_counter: u32,
}

impl RewardState {
    pub fn new(gold: &GoldTargets) -> Self {
        Self {
            coverage: vec![0.0; gold.evidence_count()],
            history: BTreeSet::new(),
            best_f1: vec![0.0; gold.sub_answer_count()],
            round_counter: 0,
            snapshots: Vec::new(),
        }
    }

    pub fn coverage(&self) -> &[f64] {
        &self.coverage
    }

    pub fn history(&self) -> &BTreeSet<String> {
        &self.history
    }

    pub fn best_f1(&self) -> &[f64] {
        &self.best_f1
    }

    pub fn snapshot_depth(&self) -> usize {
        self.snapshots.len()
    }

    /// Canonical serialization of the live fields, for exact-rollback
    /// comparisons.
    pub fn serialized(&self) -> String {
        serde_json::to_string(self).expect("reward state serializes")
    }

    /// Search reward: coverage gain minus redundancy.
    ///
    /// With gains `delta_i = max(c_i - m_i, 0)` for `c_i` the best cosine
    /// similarity of gold doc i against this retrieval, the reward is
    /// `mean(delta) - |retrieved ∩ history| / k` over the actual returned
    /// count k. An empty retrieval scores 0 and leaves state untouched.
    pub fn search_reward(&mut self, gold: &GoldTargets, retrieved: &[RetrievedDoc]) -> f64 {
        self.round_counter += 1;
        if retrieved.is_empty() {
            return 0.0;
        }
        let n = gold.evidence_count();
        let mut gain = 0.0;
        for (i, (_, gold_vec)) in gold.gold_docs.iter().enumerate() {
            let c = retrieved
                .iter()
                .map(|d| cosine_similarity(gold_vec, &d.vector))
                .fold(0.0, f64::max);
            gain += (c - self.coverage[i]).max(0.0);
            self.coverage[i] = self.coverage[i].max(c);
        }
        let g = if n == 0 { 0.0 } else { gain / n as f64 };
        let dup = retrieved
            .iter()
            .filter(|d| self.history.contains(&d.doc_id))
            .count();
        let p = dup as f64 / retrieved.len() as f64;
        for d in retrieved {
            self.history.insert(d.doc_id.clone());
        }
        let reward = g - p;
        assert!((-1.0..=1.0).contains(&reward), "search reward out of range: {reward}");
        reward
    }

    /// Sub-answer reward: the largest improvement of token F1 against any
    /// gold sub-answer, divided by max(m, 1). Repeats score zero.
    pub fn sub_answer_reward(&mut self, gold: &GoldTargets, sub_answer: &str) -> f64 {
        let m = gold.sub_answer_count();
        let mut best_delta: f64 = 0.0;
        for (i, gold_sub) in gold.gold_sub_answers.iter().enumerate() {
            let f = token_f1_single(sub_answer, gold_sub);
            let updated = self.best_f1[i].max(f);
            best_delta = best_delta.max(updated - self.best_f1[i]);
            self.best_f1[i] = updated;
        }
        let reward = best_delta / m.max(1) as f64;
        let cap = 1.0 / m.max(1) as f64;
        assert!(
            (0.0..=cap + 1e-15).contains(&reward),
            "sub-answer reward out of range: {reward}"
        );
        reward
    }

    /// Push a checkpoint of the live fields.
    pub fn snapshot(&mut self) {
        self.snapshots.push(Snapshot {
            coverage: self.coverage.clone(),
            history: self.history.clone(),
            best_f1: self.best_f1.clone(),
            round_counter: self.round_counter,
        });
    }

    /// Pop the last checkpoint and restore it exactly.
    pub fn restore(&mut self) -> Result<(), RewardError> {
        let snap = self.snapshots.pop().ok_or(RewardError::NoCheckpoint)?;
        self.coverage = snap.coverage;
        self.history = snap.history;
        self.best_f1 = snap.best_f1;
        self.round_counter = snap.round_counter;
        Ok(())
    }

    /// Pop the last checkpoint without restoring (the attempt was kept).
    pub fn discard_snapshot(&mut self) -> Result<(), RewardError> {
        self.snapshots.pop().ok_or(RewardError::NoCheckpoint)?;
        Ok(())
    }
}

/// Final answer reward: EM and token F1 against one gold, equally weighted.
pub fn final_reward(predicted: &str, gold: &str) -> f64 {
    let golds = [gold];
    let reward = 0.5 * exact_match(predicted, &golds) + 0.5 * token_f1_single(predicted, gold);
    assert!((0.0..=1.0).contains(&reward), "final reward out of range: {reward}");
    reward
}

/// Final answer reward against a set of acceptable golds: max over golds.
pub fn final_reward_set(predicted: &str, golds: &[String]) -> f64 {
    golds
        .iter()
        .map(|g| final_reward(predicted, g))
        .fold(0.0, f64::max)
}

/// One reward value pinned to a closing-tag anchor in the trace.
///
/// `attempt` is 0 for the kept segment; erased attempts keep their
/// generation order starting at 1 and are excluded from the kept reward
/// stream. `covered` records the observation-through-sub_answer interior
/// for sub-answer rewards so a trainer can spread credit without
/// duplicating the scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardAnnotation {
    pub round: usize,
    pub kind: RewardKind,
    pub value: f64,
    pub anchor: usize,
    pub attempt: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covered: Option<Span>,
}

/// Attach reward values to their closing-tag anchors in a kept trace.
/// Every (round, kind) must have a matching segment.
pub fn attribute(
    trace: &Trace,
    rewards: &[(usize, RewardKind, f64)],
) -> Result<Vec<RewardAnnotation>, RewardError> {
    let anchors = trace.anchor_positions();
    rewards
        .iter()
        .map(|&(round, kind, value)| {
            let seg_kind = match kind {
                RewardKind::Search => SegmentKind::Search,
                RewardKind::SubAnswer => SegmentKind::SubAnswer,
                RewardKind::Answer => SegmentKind::Answer,
            };
            let anchor = *anchors
                .get(&(round, seg_kind))
                .ok_or(RewardError::MissingAnchor { round, kind })?;
            let covered = match kind {
                RewardKind::SubAnswer => {
                    let r = &trace.rounds()[round - 1];
                    let obs = r.observation.as_ref().expect("sub_answer implies observation");
                    let sub = r.sub_answer.as_ref().expect("anchored sub_answer");
                    Some(Span {
                        start: obs.span.start,
                        end: sub.span.end,
                        maskable: false,
                    })
                }
                _ => None,
            };
            Ok(RewardAnnotation {
                round,
                kind,
                value,
                anchor,
                attempt: 0,
                covered,
            })
        })
        .collect()
}
