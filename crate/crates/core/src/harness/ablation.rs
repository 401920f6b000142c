use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{metrics_from_pairs, Metrics, PairResult};
use super::pipeline::{evaluate_stack, train_variant, PipelineConfig, Variant};
use super::rollout::RolloutConfig;
use crate::data_synth::{allocate_interleaved, Corpus};
use crate::error::{MotifError, Result};
use crate::train::TrainLog;

/// Settings of an ablation sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Benchmark definition file; the built-in benchmark when absent.
    pub benchmark: Option<PathBuf>,
    pub corpus_seed: u64,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub rollouts: usize,
    /// Base of the evaluation scene stream; each training seed adds to it.
    pub eval_seed: u64,
    pub rollout: RolloutConfig,
    pub pipeline: PipelineConfig,
    pub output_dir: PathBuf,
    /// Optional reference Transfer rates (percent) per variant name, shown
    /// next to the measured ones.
    pub reference: BTreeMap<String, f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            benchmark: None,
            corpus_seed: 7,
            ks: vec![5],
            seeds: vec![1, 2, 3],
            variants: Variant::ALL.to_vec(),
            rollouts: 20,
            eval_seed: 1000,
            rollout: RolloutConfig::default(),
            pipeline: PipelineConfig::desk(),
            output_dir: PathBuf::from("runs"),
            reference: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollouts == 0 {
            return Err(MotifError::Config("rollouts per pair must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(MotifError::Config("at least one seed".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(MotifError::Config("K values must be positive".into()));
        }
        if self.variants.is_empty() {
            return Err(MotifError::Config("at least one variant".into()));
        }
        Ok(())
    }
}

/// Outcome of one (variant, K, seed) cell of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub k: usize,
    pub seed: u64,
    pub pairs: Vec<PairResult>,
    pub metrics: Metrics,
    pub logs: Vec<(String, TrainLog)>,
    /// Training-set accesses outside the split.
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub k: usize,
    pub runs: usize,
    pub transfer_mean: f64,
    pub transfer_std: f64,
    pub global_mean: f64,
    pub global_std: f64,
    pub reference_transfer: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<RunRecord>,
    pub reference: BTreeMap<String, f64>,
}

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationReport {
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut cells: BTreeMap<(usize, Variant), Vec<&Metrics>> = BTreeMap::new();
        for r in &self.runs {
            cells.entry((r.k, r.variant)).or_default().push(&r.metrics);
        }
        cells
            .into_iter()
            .map(|((k, variant), ms)| {
                let t: Vec<f64> = ms.iter().map(|m| m.transfer).collect();
                let g: Vec<f64> = ms.iter().map(|m| m.global).collect();
                let (transfer_mean, transfer_std) = mean_std(&t);
                let (global_mean, global_std) = mean_std(&g);
                SummaryRow {
                    variant,
                    k,
                    runs: ms.len(),
                    transfer_mean,
                    transfer_std,
                    global_mean,
                    global_std,
                    reference_transfer: self.reference.get(variant.name()).copied(),
                }
            })
            .collect()
    }

    pub fn row(&self, variant: Variant, k: usize) -> Option<SummaryRow> {
        self.summary().into_iter().find(|r| r.variant == variant && r.k == k)
    }
}

/// Trains and evaluates every configured (K, seed, variant) combination
/// sequentially.
pub fn run_ablation_matrix(cfg: &RunConfig, corpus: &Corpus) -> Result<AblationReport> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for &k in &cfg.ks {
        let split = allocate_interleaved(corpus, &corpus.config.layout, k)?;
        for &seed in &cfg.seeds {
            for &variant in &cfg.variants {
                let t0 = Instant::now();
                let run = train_variant(corpus, &split, variant, &cfg.pipeline, seed)?;
                let trained = t0.elapsed();
                let eval_seed = cfg.eval_seed.wrapping_add(seed);
                let pairs = evaluate_stack(&run.stack, corpus, &split, cfg.rollouts, eval_seed, &cfg.rollout)?;
                let metrics = metrics_from_pairs(&pairs, &split, &[seed])?;
                log::info!(
                    "{variant} K={k} seed={seed}: transfer {:.3} global {:.3} (train {:.0?}, eval {:.0?})",
                    metrics.transfer,
                    metrics.global,
                    trained,
                    t0.elapsed() - trained
                );
                runs.push(RunRecord {
                    variant,
                    k,
                    seed,
                    pairs,
                    metrics,
                    logs: run.logs,
                    violations: run.access.violations(&split).len(),
                });
            }
        }
    }
    Ok(AblationReport {
        runs,
        reference: cfg.reference.clone(),
    })
}
