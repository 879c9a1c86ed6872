//! Word-level EM and F1 with standard answer normalization, plus
//! dataset-level aggregation over finished episodes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rollout::{Episode, QAExample};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("episodes reference unknown example ids: {0:?}")]
    UnknownExampleIds(Vec<String>),
}

/// Normalize an answer string: lowercase, strip punctuation, drop the
/// articles "a"/"an"/"the" as whole tokens, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    no_punct
        .split_whitespace()
        .filter(|tok| !matches!(*tok, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn tokens(text: &str) -> Vec<String> {
    normalize_answer(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Exact match after normalization: 1 iff the prediction equals any gold.
pub fn exact_match(predicted: &str, golds: &[impl AsRef<str>]) -> f64 {
    let p = normalize_answer(predicted);
    if golds.iter().any(|g| normalize_answer(g.as_ref()) == p) {
        1.0
    } else {
        0.0
    }
}

/// Bag-of-tokens F1 between two strings after normalization.
///
/// Multiset intersection over tokens; both sides empty after
/// normalization counts as a perfect match.
pub fn token_f1_single(predicted: &str, gold: &str) -> f64 {
    let p = tokens(predicted);
    let g = tokens(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in &g {
        *counts.entry(tok.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for tok in &p {
        if let Some(c) = counts.get_mut(tok.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token F1 against a set of acceptable golds: the maximum over golds.
pub fn token_f1(predicted: &str, golds: &[impl AsRef<str>]) -> f64 {
    golds
        .iter()
        .map(|g| token_f1_single(predicted, g.as_ref()))
        .fold(0.0, f64::max)
}

/// Per-example scores plus dataset aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mean_em: f64,
    pub mean_f1: f64,
    pub per_example: Vec<ExampleScore>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub em: f64,
    pub f1: f64,
    pub predicted: Option<String>,
    pub golds: Vec<String>,
}

impl EvalReport {
    /// Render a short human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>6} {:>6}\n",
            "example", "EM", "F1"
        ));
        for ex in &self.per_example {
            out.push_str(&format!("{:<24} {:>6.3} {:>6.3}\n", ex.id, ex.em, ex.f1));
        }
        out.push_str(&format!(
            "{:<24} {:>6.3} {:>6.3}  (n={})\n",
            "mean", self.mean_em, self.mean_f1, self.count
        ));
        out
    }
}

/// Score a run of episodes against its dataset.
///
/// Episodes without a final answer score 0/0. Input order is preserved.
pub fn evaluate_run(episodes: &[Episode], dataset: &[QAExample]) -> Result<EvalReport, EvalError> {
    let by_id: HashMap<&str, &QAExample> =
        dataset.iter().map(|ex| (ex.id.as_str(), ex)).collect();

    let mut unknown = Vec::new();
    for ep in episodes {
        if !by_id.contains_key(ep.example_id.as_str()) {
            unknown.push(ep.example_id.clone());
        }
    }
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(EvalError::UnknownExampleIds(unknown));
    }

    let mut per_example = Vec::with_capacity(episodes.len());
    let mut sum_em = 0.0;
    let mut sum_f1 = 0.0;
    for ep in episodes {
        let example = by_id[ep.example_id.as_str()];
        let predicted = ep.trace.final_answer().map(str::to_string);
        let (em, f1) = match &predicted {
            Some(p) => (
                exact_match(p, &example.golden_answers),
                token_f1(p, &example.golden_answers),
            ),
            None => (0.0, 0.0),
        };
        sum_em += em;
        sum_f1 += f1;
        per_example.push(ExampleScore {
            id: ep.example_id.clone(),
            em,
            f1,
            predicted,
            golds: example.golden_answers.clone(),
        });
    }
    let count = per_example.len();
    let denom = count.max(1) as f64;
    Ok(EvalReport {
        count,
        mean_em: sum_em / denom,
        mean_f1: sum_f1 / denom,
        per_example,
    })
}
