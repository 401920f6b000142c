use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::PairResult;
use super::rollout::{rollout_pair, PolicyStack, RolloutConfig};
use crate::data_synth::{AccessLog, BenchmarkSplit, Corpus, TrainingSet};
use crate::error::{MotifError, Result};
use crate::flow_policy::{train_stage3, Stage3Config};
use crate::motif_predictor::{train_stage2, Stage2Config};
use crate::motif_vq::{train_stage1, Stage1Config};
use crate::train::{TrainConfig, TrainLog};

/// Ablation variants of the full pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoMotif,
    NoCanonicalization,
    NoNce,
    NoAdv,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoMotif,
        Variant::NoCanonicalization,
        Variant::NoNce,
        Variant::NoAdv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMotif => "no-motif",
            Variant::NoCanonicalization => "no-canonicalization",
            Variant::NoNce => "no-nce",
            Variant::NoAdv => "no-adv",
        }
    }

    /// Stage configs for this variant, derived from the full ones.
    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoMotif => c.stage3.model.use_motif = false,
            Variant::NoCanonicalization => c.stage1.canonical = false,
            Variant::NoNce => c.stage1.model.lambda_nce = 0.0,
            Variant::NoAdv => c.stage1.model.lambda_adv = 0.0,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = MotifError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| MotifError::Config(format!("unknown variant {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
        }
    }
}

impl PipelineConfig {
    /// Stage presets shortened so that a full ablation matrix fits a
    /// desktop CPU budget.
    pub fn desk() -> Self {
        let mut stage1 = Stage1Config::desk();
        stage1.train = TrainConfig {
            lr: 1e-3,
            ..TrainConfig::with_schedule(32, 6)
        };
        let mut stage2 = Stage2Config::desk();
        stage2.train.epochs = 10;
        Self {
            stage1,
            stage2,
            stage3: Stage3Config::desk(),
        }
    }
}

/// A trained policy stack with its training logs and data-access audit.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub variant: Variant,
    pub seed: u64,
    pub stack: PolicyStack,
    pub logs: Vec<(String, TrainLog)>,
    pub access: AccessLog,
}

/// Trains every stage the variant needs on the split's training view.
pub fn train_variant(
    corpus: &Corpus,
    split: &BenchmarkSplit,
    variant: Variant,
    base: &PipelineConfig,
    seed: u64,
) -> Result<TrainedRun> {
    let cfg = variant.apply(base);
    let set = TrainingSet::new(corpus, split)?;
    let mut logs = Vec::new();
    let motif = if cfg.stage3.model.use_motif {
        log::info!("{variant} seed {seed}: stage 1");
        let s1 = train_stage1(&set, &cfg.stage1, seed)?;
        log::info!("{variant} seed {seed}: stage 2");
        let s2 = train_stage2(&set, &s1, &cfg.stage2, seed)?;
        logs.push(("stage1".to_string(), s1.log.clone()));
        logs.push(("stage2".to_string(), s2.log.clone()));
        Some((s1, s2))
    } else {
        None
    };
    log::info!("{variant} seed {seed}: stage 3");
    let s3 = train_stage3(&set, motif.as_ref().map(|(a, b)| (a, b)), &cfg.stage3, seed)?;
    logs.push(("stage3".to_string(), s3.log.clone()));
    Ok(TrainedRun {
        variant,
        seed,
        stack: PolicyStack::new(motif, s3)?,
        logs,
        access: set.log(),
    })
}

/// Rollouts for every pair of the split. Pair `i` uses rollout seeds
/// starting at `seed · 10⁶ + i · 10³`.
pub fn evaluate_stack(
    stack: &PolicyStack,
    corpus: &Corpus,
    split: &BenchmarkSplit,
    rollouts: usize,
    seed: u64,
    rc: &RolloutConfig,
) -> Result<Vec<PairResult>> {
    if rollouts == 0 {
        return Err(MotifError::Config("at least one rollout per pair".into()));
    }
    let cfg = &corpus.config;
    split
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let e = cfg
                .embodiment_index(&p.embodiment_id)
                .ok_or_else(|| MotifError::Config(format!("unknown embodiment {}", p.embodiment_id)))?;
            let t = cfg
                .task_index(&p.task_id)
                .ok_or_else(|| MotifError::Config(format!("unknown task {}", p.task_id)))?;
            stack.check_embodiment(cfg, e)?;
            let base = seed.wrapping_mul(1_000_000).wrapping_add(i as u64 * 1000);
            let records = rollout_pair(stack, cfg, e, t, rollouts, base, rc)?;
            Ok(PairResult {
                embodiment_id: p.embodiment_id.clone(),
                task_id: p.task_id.clone(),
                role: p.role,
                successes: records.iter().filter(|r| r.success).count(),
                rollouts,
            })
        })
        .collect()
}
