//! Template-action agent: a tabular softmax policy over a small discrete
//! action set, rendered into trace chunks for the rollout engine.
//!
//! Every decision is derived from the serialized context alone (question,
//! prior sub-answers, last query, last evidence), so erasure-truncated
//! retries see exactly the truncated prefix and nothing else.

use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::rollout::{GenerateRequest, Policy, PolicyError, Stage};
use crate::trace::parse_information_docs;
use crate::trainer::ppo::SoftmaxPolicy;
use crate::trainer::world::{question_start_entity, SyntheticWorld};

pub const N_ACTIONS: usize = 3;

/// Search-type actions: follow the chain or query another chain; the
/// remaining action goes stale at the first search and answers at the
/// continue point.
const ACT_NEXT_HOP: usize = 0;
const ACT_OFF_CHAIN: usize = 1;

/// Conclude actions: read the object off the evidence or name a
/// distractor; the remaining action repeats the previous conclusion.
const ACT_FROM_EVIDENCE: usize = 0;
const ACT_DISTRACTOR: usize = 1;

#[derive(Debug, Clone)]
pub struct DecisionRecord {
    pub key: String,
    pub n_actions: usize,
    pub action: usize,
    pub log_prob: f64,
    pub round: usize,
    pub stage: Stage,
    pub attempt: u32,
}

enum Mode {
    Sample(Box<ChaCha8Rng>),
    Greedy,
    /// Consume a fixed action sequence; flag when it runs short.
    Forced {
        actions: Vec<usize>,
        cursor: usize,
        exhausted: bool,
    },
}

struct Inner {
    mode: Mode,
    records: Vec<DecisionRecord>,
}

/// A [`Policy`] over the synthetic world backed by a logit table.
pub struct TrainerPolicy {
    relations: Vec<String>,
    chains: Vec<Vec<String>>,
    table: SoftmaxPolicy,
    inner: Mutex<Inner>,
}

impl TrainerPolicy {
    pub fn sampling(world: &SyntheticWorld, table: SoftmaxPolicy, seed: u64) -> Self {
        Self::with_mode(
            world,
            table,
            Mode::Sample(Box::new(ChaCha8Rng::seed_from_u64(seed))),
        )
    }

    pub fn greedy(world: &SyntheticWorld, table: SoftmaxPolicy) -> Self {
        Self::with_mode(world, table, Mode::Greedy)
    }

    pub fn forced(world: &SyntheticWorld, actions: Vec<usize>) -> Self {
        Self::with_mode(
            world,
            SoftmaxPolicy::new(),
            Mode::Forced {
                actions,
                cursor: 0,
                exhausted: false,
            },
        )
    }

    fn with_mode(world: &SyntheticWorld, table: SoftmaxPolicy, mode: Mode) -> Self {
        Self {
            relations: world.relations.clone(),
            chains: world.chains.clone(),
            table,
            inner: Mutex::new(Inner {
                mode,
                records: Vec::new(),
            }),
        }
    }

    /// Drain the decisions recorded since the last call.
    pub fn take_records(&self) -> Vec<DecisionRecord> {
        std::mem::take(&mut self.inner.lock().expect("agent lock").records)
    }

    /// Whether a forced action sequence ran out mid-episode.
    pub fn forced_exhausted(&self) -> bool {
        match &self.inner.lock().expect("agent lock").mode {
            Mode::Forced { exhausted, .. } => *exhausted,
            _ => false,
        }
    }

    fn decide(&self, key: &str, request: &GenerateRequest<'_>) -> usize {
        let mut inner = self.inner.lock().expect("agent lock");
        let (action, log_prob) = match &mut inner.mode {
            Mode::Sample(rng) => self.table.sample(key, N_ACTIONS, rng),
            Mode::Greedy => {
                let a = self.table.greedy(key, N_ACTIONS);
                (a, self.table.log_prob(key, N_ACTIONS, a))
            }
            Mode::Forced {
                actions,
                cursor,
                exhausted,
            } => {
                let a = if *cursor < actions.len() {
                    let a = actions[*cursor];
                    *cursor += 1;
                    a
                } else {
                    *exhausted = true;
                    0
                };
                (a, self.table.log_prob(key, N_ACTIONS, a))
            }
        };
        inner.records.push(DecisionRecord {
            key: key.to_string(),
            n_actions: N_ACTIONS,
            action,
            log_prob,
            round: request.round,
            stage: request.stage,
            attempt: request.attempt,
        });
        action
    }
}

/// Everything the templates need, read off the context text.
struct ContextView {
    start_entity: String,
    sub_answers: Vec<String>,
    last_query: Option<String>,
    last_evidence_object: Option<String>,
}

impl ContextView {
    fn read(context: &str) -> Self {
        let question = context.lines().next().unwrap_or("");
        let start_entity = question_start_entity(question).unwrap_or("").to_string();
        let sub_answers: Vec<String> = tag_contents(context, "sub_answer")
            .into_iter()
            .map(|s| s.trim().to_string())
            .collect();
        let last_query = tag_contents(context, "search")
            .into_iter()
            .next_back()
            .map(|s| s.trim().to_string());
        let last_evidence_object = tag_contents(context, "information")
            .into_iter()
            .next_back()
            .and_then(|block| {
                let docs = parse_information_docs(&block);
                let first = docs.first()?;
                first
                    .text
                    .split_whitespace()
                    .next_back()
                    .map(str::to_string)
            });
        Self {
            start_entity,
            sub_answers,
            last_query,
            last_evidence_object,
        }
    }

    fn hops_done(&self) -> usize {
        self.sub_answers.len()
    }

    fn current_entity(&self) -> &str {
        self.sub_answers
            .last()
            .map(String::as_str)
            .unwrap_or(&self.start_entity)
    }
}

fn tag_contents(text: &str, tag: &str) -> Vec<String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(rel) = text[from..].find(&open) {
        let start = from + rel + open.len();
        let Some(end_rel) = text[start..].find(&close) else {
            break;
        };
        out.push(text[start..start + end_rel].to_string());
        from = start + end_rel + close.len();
    }
    out
}

impl TrainerPolicy {
    fn next_hop_query(&self, view: &ContextView) -> String {
        match self.relations.get(view.hops_done()) {
            Some(rel) => format!("{rel} {}", view.current_entity()),
            None => self.stale_query(view),
        }
    }

    fn off_chain_query(&self, view: &ContextView) -> String {
        let rel_idx = view.hops_done().min(self.relations.len() - 1);
        format!("{} {}", self.relations[rel_idx], self.distractor(view))
    }

    fn stale_query(&self, view: &ContextView) -> String {
        view.last_query
            .clone()
            .unwrap_or_else(|| "nothing useful here".to_string())
    }

    fn distractor(&self, view: &ContextView) -> String {
        let chain_idx = self
            .chains
            .iter()
            .position(|c| c[0] == view.start_entity)
            .unwrap_or(0);
        let other = (chain_idx + 1) % self.chains.len();
        self.chains[other][1].clone()
    }
}

impl Policy for TrainerPolicy {
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<String, PolicyError> {
        let view = ContextView::read(request.context);
        let text = match request.stage {
            Stage::Observation => {
                let note = match &view.last_evidence_object {
                    Some(obj) => format!("The evidence points to {obj}."),
                    None => "No useful evidence retrieved.".to_string(),
                };
                format!("<observation>{note}</observation>")
            }
            Stage::SubAnswer => {
                let key = format!("sub{}", view.hops_done());
                let conclusion = match self.decide(&key, request) {
                    ACT_FROM_EVIDENCE => view
                        .last_evidence_object
                        .clone()
                        .unwrap_or_else(|| "unknown".to_string()),
                    ACT_DISTRACTOR => self.distractor(&view),
                    _ => view.current_entity().to_string(), // repeat
                };
                format!("<sub_answer>{conclusion}</sub_answer>")
            }
            Stage::Search => {
                let query = match self.decide("s1", request) {
                    ACT_NEXT_HOP => self.next_hop_query(&view),
                    ACT_OFF_CHAIN => self.off_chain_query(&view),
                    _ => self.stale_query(&view),
                };
                format!("<search>{query}</search>")
            }
            Stage::AnswerOrSearch => {
                let key = format!("soa{}", view.hops_done());
                match self.decide(&key, request) {
                    ACT_NEXT_HOP => format!("<search>{}</search>", self.next_hop_query(&view)),
                    ACT_OFF_CHAIN => {
                        format!("<search>{}</search>", self.off_chain_query(&view))
                    }
                    _ => format!("<answer>{}</answer>", view.current_entity()),
                }
            }
        };
        Ok(text)
    }
}
