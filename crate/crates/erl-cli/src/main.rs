//! `erl` binary: index building, episode simulation, evaluation, toy
//! training, and config management.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 runtime failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use config::{EngineOverrides, RunConfig};
use erl_core::index::{load_corpus, write_corpus_jsonl, TfIdfIndex};
use erl_core::metrics::evaluate_run;
use erl_core::rollout::{
    load_dataset, read_episodes_jsonl, run_dataset, write_dataset_jsonl, write_episodes_jsonl,
    DocRetriever, EngineConfig, ExternalClient, ExternalPolicy, Policy, ScriptedPolicy,
};
use erl_core::trainer::{compare_algorithms, make_world, train, Algo, TrainError};
use erl_core::ErasureKind;

#[derive(Parser)]
#[command(name = "erl", version, about = "Erasable rollouts for search-augmented reasoning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a TF-IDF index from a JSONL corpus
    Index(IndexArgs),
    /// Roll out episodes over a dataset with a scripted or external policy
    Simulate(SimulateArgs),
    /// Score an episode file against its dataset (EM / F1)
    Evaluate(EvaluateArgs),
    /// Train the tabular policy on a synthetic multi-hop world
    Train(TrainArgs),
    /// Print the effective configuration after file and flag merging
    Config(ConfigArgs),
}

#[derive(Args)]
struct IndexArgs {
    /// Corpus file: one JSON document per line with id, title, text
    #[arg(long, env = "ERL_CORPUS")]
    corpus: PathBuf,
    /// Output index file
    #[arg(long, env = "ERL_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Dataset file: one JSON example per line
    #[arg(long, env = "ERL_DATASET")]
    dataset: PathBuf,
    /// Index file built by `erl index`
    #[arg(long, env = "ERL_INDEX")]
    index: PathBuf,
    /// Policy: scripted:<script.json> or external:tcp:<addr> / external:cmd:<command>
    #[arg(long, env = "ERL_POLICY")]
    policy: String,
    /// Optional TOML config file
    #[arg(long, env = "ERL_CONFIG")]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: EngineOverrides,
    /// Concurrent episodes
    #[arg(long, env = "ERL_PARALLEL", default_value_t = 1)]
    parallel: usize,
    /// Episode output file (JSON lines)
    #[arg(long, env = "ERL_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Episode file produced by `erl simulate`
    #[arg(long, env = "ERL_EPISODES")]
    episodes: PathBuf,
    #[arg(long, env = "ERL_DATASET")]
    dataset: PathBuf,
    /// Optional JSON report output
    #[arg(long, env = "ERL_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory for world files, curves, and policies
    #[arg(long, env = "ERL_OUT")]
    out: PathBuf,
    /// Optional TOML config file
    #[arg(long, env = "ERL_CONFIG")]
    config: Option<PathBuf>,
    /// ppo_sparse or erl
    #[arg(long, env = "ERL_ALGO")]
    algo: Option<String>,
    #[arg(long, env = "ERL_SEED")]
    seed: Option<u64>,
    /// Run both algorithms on each seed and print the comparison table
    #[arg(long, env = "ERL_SEEDS", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Chain length of the synthetic world
    #[arg(long, env = "ERL_HOP_DEPTH", default_value_t = 2)]
    hop_depth: usize,
    /// Entity pool size of the synthetic world
    #[arg(long, env = "ERL_N_ENTITIES", default_value_t = 15)]
    n_entities: usize,
    /// Concurrent seeds in --seeds mode
    #[arg(long, env = "ERL_PARALLEL", default_value_t = 1)]
    parallel: usize,
    #[command(flatten)]
    overrides: EngineOverrides,
}

#[derive(Args)]
struct ConfigArgs {
    /// Optional TOML config file to start from
    #[arg(long, env = "ERL_CONFIG")]
    config: Option<PathBuf>,
    /// Optional file to write the merged config to
    #[arg(long, env = "ERL_OUT")]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: EngineOverrides,
    #[arg(long, env = "ERL_ALGO")]
    algo: Option<String>,
    #[arg(long, env = "ERL_SEED")]
    seed: Option<u64>,
}

enum AppError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Usage(m) | AppError::Data(m) | AppError::Runtime(m) => m,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> AppError {
    AppError::Data(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Index(args) => cmd_index(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Train(args) => cmd_train(args),
        Command::Config(args) => cmd_config(args),
    }
}

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig, AppError> {
    match path {
        Some(p) => RunConfig::load(p).map_err(data),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_index(args: IndexArgs) -> Result<(), AppError> {
    let docs = load_corpus(&args.corpus).map_err(data)?;
    let index = TfIdfIndex::build(docs).map_err(data)?;
    index.save(&args.out).map_err(data)?;
    println!(
        "{} documents indexed, vocabulary size {}, written to {}",
        index.doc_count(),
        index.vocab_size(),
        args.out.display()
    );
    Ok(())
}

fn build_policy(spec: &str) -> Result<Box<dyn Policy>, AppError> {
    if let Some(path) = spec.strip_prefix("scripted:") {
        let policy = ScriptedPolicy::from_path(Path::new(path))
            .map_err(|e| AppError::Data(format!("cannot load script {path}: {e}")))?;
        Ok(Box::new(policy))
    } else if let Some(endpoint) = spec.strip_prefix("external:") {
        let client = ExternalClient::connect(endpoint, Duration::from_secs(30), 2)
            .map_err(|e| AppError::Runtime(format!("cannot reach policy endpoint: {e}")))?;
        Ok(Box::new(ExternalPolicy::new(Arc::new(client))))
    } else {
        Err(AppError::Usage(format!(
            "bad --policy {spec:?}: expected scripted:<path> or external:<endpoint>"
        )))
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), AppError> {
    let mut run_config = load_run_config(&args.config)?;
    args.overrides.apply_engine(&mut run_config.engine);
    let engine: EngineConfig = run_config.engine;

    let dataset = load_dataset(&args.dataset).map_err(data)?;
    let index = TfIdfIndex::load(&args.index).map_err(data)?;
    let policy = build_policy(&args.policy)?;
    let retriever: &dyn DocRetriever = &index;

    let results = run_dataset(
        &dataset,
        policy.as_ref(),
        &engine,
        &index,
        retriever,
        args.parallel.max(1),
    );
    let file = fs::File::create(&args.out).map_err(data)?;
    let (ok, failed) =
        write_episodes_jsonl(&results, std::io::BufWriter::new(file)).map_err(data)?;

    let mut counts = std::collections::BTreeMap::new();
    let mut exhausted = 0usize;
    for ep in results.iter().flatten() {
        for event in &ep.erasure_events {
            if event.budget_exhausted {
                exhausted += 1;
            }
            if event.kind != ErasureKind::None {
                *counts.entry(format!("{:?}", event.kind)).or_insert(0usize) += 1;
            }
        }
    }
    println!("{ok} episodes written, {failed} failed");
    println!(
        "erasures: plan {}, search {}, sub_answer {}, budget_exhausted {}",
        counts.get("ErasePlan").unwrap_or(&0),
        counts.get("EraseSearch").unwrap_or(&0),
        counts.get("EraseSubAnswer").unwrap_or(&0),
        exhausted
    );
    if ok == 0 && !results.is_empty() {
        return Err(AppError::Runtime("every episode failed".to_string()));
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), AppError> {
    let episodes =
        read_episodes_jsonl(fs::File::open(&args.episodes).map_err(data)?).map_err(data)?;
    let dataset = load_dataset(&args.dataset).map_err(data)?;
    let report = evaluate_run(&episodes, &dataset).map_err(data)?;
    print!("{}", report.table());
    println!("EM {:.3} F1 {:.3}", report.mean_em, report.mean_f1);
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&report).map_err(data)?;
        fs::write(out, json).map_err(data)?;
    }
    Ok(())
}

fn parse_algo(raw: &Option<String>) -> Result<Option<Algo>, AppError> {
    match raw {
        None => Ok(None),
        Some(s) => s.parse::<Algo>().map(Some).map_err(AppError::Usage),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), AppError> {
    let mut run_config = load_run_config(&args.config)?;
    args.overrides.apply_train(&mut run_config.train);
    if let Some(algo) = parse_algo(&args.algo)? {
        run_config.train.algo = algo;
    }
    if let Some(seed) = args.seed {
        run_config.train.seed = seed;
    }
    let train_config = run_config.train;
    fs::create_dir_all(&args.out).map_err(data)?;

    if !args.seeds.is_empty() {
        let rows = if args.parallel > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(args.parallel)
                .build()
                .map_err(|e| AppError::Runtime(e.to_string()))?;
            pool.install(|| {
                use rayon::prelude::*;
                args.seeds
                    .par_iter()
                    .map(|&s| compare_algorithms(args.hop_depth, args.n_entities, &train_config, &[s]))
                    .collect::<Result<Vec<_>, _>>()
            })
            .map(|nested| nested.into_iter().flatten().collect::<Vec<_>>())
            .map_err(|e| AppError::Runtime(e.to_string()))?
        } else {
            compare_algorithms(args.hop_depth, args.n_entities, &train_config, &args.seeds)
                .map_err(|e| AppError::Runtime(e.to_string()))?
        };
        println!("{:<6} {:>8} {:>12}", "seed", "erl", "ppo_sparse");
        for row in &rows {
            println!("{:<6} {:>8.3} {:>12.3}", row.seed, row.erl_em, row.ppo_sparse_em);
        }
        let n = rows.len().max(1) as f64;
        let mean_erl: f64 = rows.iter().map(|r| r.erl_em).sum::<f64>() / n;
        let mean_sparse: f64 = rows.iter().map(|r| r.ppo_sparse_em).sum::<f64>() / n;
        println!("{:<6} {:>8.3} {:>12.3}", "mean", mean_erl, mean_sparse);
        let json = serde_json::to_string_pretty(&rows).map_err(data)?;
        fs::write(args.out.join("comparison.json"), json).map_err(data)?;
        return Ok(());
    }

    let world = make_world(train_config.seed, args.hop_depth, args.n_entities)
        .map_err(|e| AppError::Usage(e.to_string()))?;
    let corpus_file = fs::File::create(args.out.join("corpus.jsonl")).map_err(data)?;
    write_corpus_jsonl(&world.corpus, std::io::BufWriter::new(corpus_file)).map_err(data)?;
    let dataset_file = fs::File::create(args.out.join("dataset.jsonl")).map_err(data)?;
    write_dataset_jsonl(&world.dataset, std::io::BufWriter::new(dataset_file)).map_err(data)?;

    let write_curve = |curve: &[erl_core::trainer::Checkpoint]| -> Result<(), AppError> {
        let mut out = String::new();
        for point in curve {
            out.push_str(&serde_json::to_string(point).map_err(data)?);
            out.push('\n');
        }
        fs::write(args.out.join("curve.jsonl"), out).map_err(data)
    };

    match train(&world, &train_config) {
        Ok(report) => {
            write_curve(&report.curve)?;
            let policy_json = serde_json::to_string_pretty(&report.final_policy).map_err(data)?;
            fs::write(args.out.join("policy.json"), policy_json).map_err(data)?;
            println!(
                "trained {} for {} iterations, final EM {:.3}, outputs in {}",
                train_config.algo,
                report.curve.len(),
                report.final_em(),
                args.out.display()
            );
            Ok(())
        }
        Err(TrainError::Diverged {
            iteration,
            reason,
            partial,
        }) => {
            write_curve(&partial.curve)?;
            Err(AppError::Runtime(format!(
                "training diverged at iteration {iteration} ({reason}); last checkpoint retained"
            )))
        }
        Err(e) => Err(AppError::Runtime(e.to_string())),
    }
}

fn cmd_config(args: ConfigArgs) -> Result<(), AppError> {
    let mut run_config = load_run_config(&args.config)?;
    args.overrides.apply_engine(&mut run_config.engine);
    args.overrides.apply_train(&mut run_config.train);
    if let Some(algo) = parse_algo(&args.algo)? {
        run_config.train.algo = algo;
    }
    if let Some(seed) = args.seed {
        run_config.train.seed = seed;
    }
    let text = run_config.to_toml();
    print!("{text}");
    if let Some(out) = &args.out {
        fs::write(out, text).map_err(data)?;
    }
    Ok(())
}
