use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use motif_core::data_synth::{
    allocate_interleaved, generate_corpus, read_corpus, write_corpus, BenchmarkConfig, BenchmarkSplit,
    Corpus, TrainingSet, OBS_DIM, STATE_DIM,
};
use motif_core::flow_policy::{load_stage3, save_stage3, train_stage3, Stage3Config};
use motif_core::harness::{
    emit_report, evaluate_stack, load_report, metrics_from_pairs, run_ablation_matrix, ChunkPolicy,
    PolicyStack, RolloutConfig, RunConfig, WorldView,
};
use motif_core::motif_predictor::{load_stage2, save_stage2, train_stage2, Stage2Config};
use motif_core::motif_vq::{load_stage1, save_stage1, train_stage1, Stage1Config};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "motif", version, about = "Motif-guided cross-embodiment policy pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct SplitArgs {
    /// Split file written by gen-data; overrides --k.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Few-shot budget for an interleaved split built on the fly.
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a demonstration corpus and its K=1 and K=5 splits.
    GenData {
        /// Benchmark overrides (TOML) on top of the built-in benchmark.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train the motif tokenizer.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        /// Overrides (TOML) on top of the desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train the motif predictor against a frozen tokenizer.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train the flow-matching policy.
    TrainStage3 {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, requires = "stage2")]
        stage1: Option<PathBuf>,
        #[arg(long, requires = "stage1")]
        stage2: Option<PathBuf>,
        /// Train without motif conditioning.
        #[arg(long, conflicts_with_all = ["stage1", "stage2"])]
        no_motif: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Generate one action chunk for a query.
    Infer {
        /// Directory holding stage3/ and, for motif policies, stage1/ and stage2/.
        #[arg(long)]
        ckpts: PathBuf,
        /// JSON query with embodiment, task, state and observation.
        #[arg(long)]
        episode: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the chunk here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop success rates on every pair of a split.
    Eval {
        #[arg(long)]
        ckpts: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value_t = 20)]
        rollouts: usize,
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a matrix of variants, K values and seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory; generated from the config's benchmark when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild tables and plots from a finished ablation.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A single-step query for `infer`.
#[derive(Debug, Deserialize)]
struct Query {
    embodiment: String,
    task: String,
    state: Vec<f64>,
    observation: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct ChunkRecord {
    embodiment: String,
    task: String,
    seed: u64,
    chunk: Vec<Vec<f64>>,
}

/// Deep-merges TOML tables from `path` over the serialized `base`.
fn load_overrides<T: Serialize + DeserializeOwned>(base: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(base) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let patch: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
    let mut merged = toml::Table::try_from(&base)?;
    merge(&mut merged, patch);
    toml::Value::Table(merged)
        .try_into()
        .with_context(|| format!("applying {}", path.display()))
}

fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn read_split(corpus: &Corpus, args: &SplitArgs) -> Result<BenchmarkSplit> {
    match &args.split {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
        }
        None => Ok(allocate_interleaved(corpus, &corpus.config.layout, args.k)?),
    }
}

fn load_stack(dir: &Path) -> Result<PolicyStack> {
    let policy = load_stage3(&dir.join("stage3")).context("loading stage3 checkpoint")?;
    let motif = if policy.model.config.use_motif {
        let s1 = load_stage1(&dir.join("stage1")).context("loading stage1 checkpoint")?;
        let s2 = load_stage2(&dir.join("stage2")).context("loading stage2 checkpoint")?;
        Some((s1, s2))
    } else {
        None
    };
    Ok(PolicyStack::new(motif, policy)?)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = load_overrides(BenchmarkConfig::default(), config.as_deref())?;
            let corpus = generate_corpus(&cfg, seed)?;
            write_corpus(&corpus, &out)?;
            for k in [1, 5] {
                if k > cfg.episodes_per_pair {
                    continue;
                }
                let split = allocate_interleaved(&corpus, &cfg.layout, k)?;
                let path = out.join(format!("split_k{k}.json"));
                fs::write(&path, serde_json::to_string_pretty(&split)?)?;
            }
            println!("{} episodes written to {}", corpus.episodes.len(), out.display());
        }
        Command::TrainStage1 {
            data,
            split,
            config,
            out,
            seed,
        } => {
            let corpus = read_corpus(&data)?;
            let split = read_split(&corpus, &split)?;
            let cfg = load_overrides(Stage1Config::desk(), config.as_deref())?;
            let set = TrainingSet::new(&corpus, &split)?;
            let trained = train_stage1(&set, &cfg, seed)?;
            save_stage1(&out, &trained)?;
            if let Some(last) = trained.log.epochs.last() {
                println!("stage1 final loss {:.5}", last.loss);
            }
        }
        Command::TrainStage2 {
            data,
            split,
            stage1,
            config,
            out,
            seed,
        } => {
            let corpus = read_corpus(&data)?;
            let split = read_split(&corpus, &split)?;
            let cfg = load_overrides(Stage2Config::desk(), config.as_deref())?;
            let s1 = load_stage1(&stage1)?;
            let set = TrainingSet::new(&corpus, &split)?;
            let trained = train_stage2(&set, &s1, &cfg, seed)?;
            save_stage2(&out, &trained)?;
            if let Some(last) = trained.log.epochs.last() {
                println!("stage2 final loss {:.5}", last.loss);
            }
        }
        Command::TrainStage3 {
            data,
            split,
            stage1,
            stage2,
            no_motif,
            config,
            out,
            seed,
        } => {
            let corpus = read_corpus(&data)?;
            let split = read_split(&corpus, &split)?;
            let mut cfg = load_overrides(Stage3Config::desk(), config.as_deref())?;
            let motif = match (stage1, stage2) {
                (Some(a), Some(b)) => Some((load_stage1(&a)?, load_stage2(&b)?)),
                _ if no_motif => None,
                _ => bail!("give --stage1 and --stage2, or --no-motif"),
            };
            cfg.model.use_motif = motif.is_some();
            let set = TrainingSet::new(&corpus, &split)?;
            let trained = train_stage3(&set, motif.as_ref().map(|(a, b)| (a, b)), &cfg, seed)?;
            save_stage3(&out, &trained)?;
            if let Some(last) = trained.log.epochs.last() {
                println!("stage3 final loss {:.5}", last.loss);
            }
        }
        Command::Infer {
            ckpts,
            episode,
            seed,
            out,
        } => {
            let stack = load_stack(&ckpts)?;
            let text = fs::read_to_string(&episode).with_context(|| format!("reading {}", episode.display()))?;
            let q: Query = serde_json::from_str(&text).with_context(|| format!("parsing {}", episode.display()))?;
            if q.state.len() != STATE_DIM || q.observation.len() != OBS_DIM {
                bail!(
                    "query needs a {STATE_DIM}-dim state and {OBS_DIM}-dim observation, got {} and {}",
                    q.state.len(),
                    q.observation.len()
                );
            }
            let bench = BenchmarkConfig::default();
            let e = bench
                .embodiment_index(&q.embodiment)
                .with_context(|| format!("unknown embodiment {}", q.embodiment))?;
            let task = bench.task(&q.task)?;
            stack.check_embodiment(&bench, e)?;
            let view = WorldView {
                state: [q.state[0], q.state[1], q.state[2], q.state[3]],
                obs: q.observation,
                seed,
                step: 0,
            };
            let chunk = stack.act(e, task.instruction, &[view])?.remove(0);
            let rec = ChunkRecord {
                embodiment: q.embodiment,
                task: q.task,
                seed,
                chunk: (0..chunk.shape()[0]).map(|k| chunk.row(k).to_vec()).collect(),
            };
            write_or_print(out.as_deref(), &serde_json::to_string_pretty(&rec)?)?;
        }
        Command::Eval {
            ckpts,
            data,
            split,
            rollouts,
            seed,
            out,
        } => {
            let stack = load_stack(&ckpts)?;
            let corpus = read_corpus(&data)?;
            let split = read_split(&corpus, &SplitArgs { split: Some(split), k: 0 })?;
            let pairs = evaluate_stack(&stack, &corpus, &split, rollouts, seed, &RolloutConfig::default())?;
            let metrics = metrics_from_pairs(&pairs, &split, &[stack.policy.seed])?;
            for p in &pairs {
                log::info!("{}/{} {:?}: {}/{}", p.embodiment_id, p.task_id, p.role, p.successes, p.rollouts);
            }
            write_or_print(out.as_deref(), &serde_json::to_string_pretty(&metrics)?)?;
        }
        Command::Ablate { config, data, out } => {
            let mut cfg = load_overrides(RunConfig::default(), config.as_deref())?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let corpus = match data {
                Some(dir) => read_corpus(&dir)?,
                None => {
                    let bench = match &cfg.benchmark {
                        Some(p) => load_overrides(BenchmarkConfig::default(), Some(p))?,
                        None => BenchmarkConfig::default(),
                    };
                    generate_corpus(&bench, cfg.corpus_seed)?
                }
            };
            let report = run_ablation_matrix(&cfg, &corpus)?;
            let files = emit_report(&report, &cfg.output_dir)?;
            for row in report.summary() {
                println!(
                    "{:<20} K={} transfer {:5.1}% ± {:4.1}  global {:5.1}% ± {:4.1}",
                    row.variant.name(),
                    row.k,
                    100.0 * row.transfer_mean,
                    100.0 * row.transfer_std,
                    100.0 * row.global_mean,
                    100.0 * row.global_std
                );
            }
            println!("{} files in {}", files.len(), cfg.output_dir.display());
        }
        Command::Report { runs, out } => {
            let report = load_report(&runs)?;
            let dir = out.unwrap_or(runs);
            let files = emit_report(&report, &dir)?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
