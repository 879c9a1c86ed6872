//! Shared setup for the benchmark targets: a mid-sized synthetic world,
//! its index, and a scripted two-hop policy.

use erl_core::rollout::{slot, EngineConfig, QAExample, ScriptedPolicy, Stage};
use erl_core::trainer::{make_world, SyntheticWorld};
use erl_core::TfIdfIndex;

pub struct BenchWorld {
    pub world: SyntheticWorld,
    pub index: TfIdfIndex,
    pub examples: Vec<QAExample>,
    pub policy: ScriptedPolicy,
    pub config: EngineConfig,
}

pub fn bench_world(n_examples: usize) -> BenchWorld {
    let world = make_world(123, 2, 3 * n_examples.max(2)).expect("world");
    let index = TfIdfIndex::build(world.corpus.iter().cloned()).expect("index");
    let examples: Vec<QAExample> = world.dataset.iter().take(n_examples).cloned().collect();
    let chain = &world.chains[0];
    let policy = ScriptedPolicy::new([
        slot(
            1,
            Stage::Search,
            &[&format!("<search>{} {}</search>", world.relations[0], chain[0])],
        ),
        slot(2, Stage::Observation, &["<observation>first hop</observation>"]),
        slot(
            2,
            Stage::SubAnswer,
            &[&format!("<sub_answer>{}</sub_answer>", chain[1])],
        ),
        slot(
            2,
            Stage::AnswerOrSearch,
            &[&format!("<search>{} {}</search>", world.relations[1], chain[1])],
        ),
        slot(3, Stage::Observation, &["<observation>second hop</observation>"]),
        slot(
            3,
            Stage::SubAnswer,
            &[&format!("<sub_answer>{}</sub_answer>", chain[2])],
        ),
        slot(
            3,
            Stage::AnswerOrSearch,
            &[&format!("<answer>{}</answer>", chain[2])],
        ),
    ]);
    let config = EngineConfig {
        max_rounds: 4,
        ..EngineConfig::default()
    };
    BenchWorld {
        world,
        index,
        examples,
        policy,
        config,
    }
}
