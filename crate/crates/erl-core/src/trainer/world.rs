//! Synthetic multi-hop world: disjoint entity chains linked by per-hop
//! relations, rendered as a fact corpus plus QA examples with gold
//! sub-answers and gold evidence, one document per hop.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::index::Document;
use crate::rollout::QAExample;
use crate::trainer::TrainError;

const RELATIONS: [&str; 4] = ["birthplace", "employer", "capital", "founder"];

const SYLLABLES: [&str; 18] = [
    "ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "mu", "ne", "po", "ru", "sa", "te", "vi",
    "wo", "yu", "za",
];

/// Entity chains plus the rendered corpus and dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub hop_depth: usize,
    /// relation name per hop, in hop order
    pub relations: Vec<String>,
    /// each chain has hop_depth + 1 entities
    pub chains: Vec<Vec<String>>,
    pub corpus: Vec<Document>,
    pub dataset: Vec<QAExample>,
}

/// Build a world deterministically from a seed.
///
/// Entities are grouped into disjoint chains of `hop_depth + 1`; each hop
/// becomes one fact document `"{prev} {relation} {next}"`, so every
/// question is answerable by exactly one chain of hops with exactly one
/// gold document per hop.
pub fn make_world(
    seed: u64,
    hop_depth: usize,
    n_entities: usize,
) -> Result<SyntheticWorld, TrainError> {
    if !(2..=4).contains(&hop_depth) {
        return Err(TrainError::InfeasibleWorld(format!(
            "hop_depth {hop_depth} outside [2, 4]"
        )));
    }
    let chain_len = hop_depth + 1;
    if n_entities < chain_len {
        return Err(TrainError::InfeasibleWorld(format!(
            "n_entities {n_entities} < hop_depth + 1 = {chain_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities = entity_names(&mut rng, n_entities);
    let chains: Vec<Vec<String>> = entities
        .chunks_exact(chain_len)
        .map(|c| c.to_vec())
        .collect();
    let relations: Vec<String> = RELATIONS[..hop_depth]
        .iter()
        .map(|r| r.to_string())
        .collect();

    let mut corpus = Vec::new();
    let mut dataset = Vec::new();
    for (c, chain) in chains.iter().enumerate() {
        let mut evidence = Vec::new();
        for h in 0..hop_depth {
            let text = format!("{} {} {}", chain[h], relations[h], chain[h + 1]);
            corpus.push(Document::new(
                format!("f{}c{}", h + 1, c),
                format!("{} {}", chain[h], relations[h]),
                text.clone(),
            ));
            evidence.push(text);
        }
        dataset.push(QAExample {
            id: format!("q{c}"),
            question: render_question(&relations, &chain[0]),
            golden_answers: vec![chain[hop_depth].clone()],
            sub_answers: chain[1..].to_vec(),
            evidence,
        });
    }
    Ok(SyntheticWorld {
        seed,
        hop_depth,
        relations,
        chains,
        corpus,
        dataset,
    })
}

/// `"What is the r2 of the r1 of e0?"`, innermost relation last.
fn render_question(relations: &[String], start: &str) -> String {
    let mut q = String::from("What is");
    for rel in relations.iter().rev() {
        q.push_str(&format!(" the {rel} of"));
    }
    q.push_str(&format!(" {start}?"));
    q
}

/// The chain-start entity named in a rendered question.
pub fn question_start_entity(question: &str) -> Option<&str> {
    question
        .split_whitespace()
        .last()
        .map(|t| t.trim_end_matches('?'))
        .filter(|t| !t.is_empty())
}

fn entity_names(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(n);
    let mut seen = std::collections::BTreeSet::new();
    while names.len() < n {
        let mut name: String = (0..3)
            .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
            .collect();
        // syllable combinations run out for very large n; suffix to stay unique
        if seen.contains(&name) {
            name.push_str(&names.len().to_string());
        }
        if seen.insert(name.clone()) && !RELATIONS.contains(&name.as_str()) {
            names.push(name);
        }
    }
    names
}
