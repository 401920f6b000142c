use std::path::Path;

use motif_nn::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_predictor, loss_predictor_graph, PredictorConfig, PredictorModel};
use crate::checkpoint::{self, params_digest};
use crate::data_synth::{segment_episode, TrainingSet, OBS_DIM};
use crate::error::{MotifError, Result};
use crate::motif_vq::{encode_samples, Stage1Sample, TrainedStage1};
use crate::train::{fit, StepOutput, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub model: PredictorConfig,
    pub train: TrainConfig,
    pub stride: usize,
    /// Share of windows held out for the validation curve.
    pub val_fraction: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            model: PredictorConfig::default(),
            train: TrainConfig::with_schedule(128, 30),
            stride: 16,
            val_fraction: 0.1,
        }
    }
}

impl Stage2Config {
    pub fn desk() -> Self {
        Self {
            model: PredictorConfig::desk(),
            train: TrainConfig {
                lr: 1e-3,
                ..TrainConfig::with_schedule(32, 30)
            },
            stride: 8,
            val_fraction: 0.1,
        }
    }
}

/// An observation at a window start with its Stage I target tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Sample {
    pub obs: Vec<f64>,
    pub instruction: usize,
    /// `[M, d_e]` frozen encoder output for the window.
    pub target: Tensor,
    pub embodiment: usize,
    pub task: usize,
}

pub fn stage2_samples(set: &TrainingSet, stage1: &TrainedStage1, stride: usize) -> Result<Vec<Stage2Sample>> {
    let h_s = stage1.model.config.h_s;
    let cfg = &set.corpus().config;
    let mut windows = Vec::new();
    let mut obs = Vec::new();
    for i in 0..set.len() {
        let (e, t, ep) = set.get(i);
        for s in segment_episode(ep, h_s, stride)?.items {
            windows.push(Stage1Sample {
                values: stage1.transform.apply(&s.states, &cfg.embodiments[e])?,
                progress: s.progress,
                instruction: s.instruction,
                embodiment: e,
                task: t,
            });
            obs.push(ep.observations.row(s.start).to_vec());
        }
    }
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    let z = encode_samples(&stage1.model, &windows)?;
    let (m, d) = (stage1.model.config.m, stage1.model.config.d_e);
    Ok(windows
        .into_iter()
        .zip(obs)
        .enumerate()
        .map(|(i, (w, o))| Stage2Sample {
            obs: o,
            instruction: w.instruction,
            target: Tensor::new(&[m, d], z.data()[i * m * d..(i + 1) * m * d].to_vec()),
            embodiment: w.embodiment,
            task: w.task,
        })
        .collect())
}

fn batch(samples: &[Stage2Sample], idx: &[usize]) -> (Tensor, Vec<usize>, Tensor) {
    let od = samples[idx[0]].obs.len();
    let ts = samples[idx[0]].target.shape().to_vec();
    let mut obs = Vec::with_capacity(idx.len() * od);
    let mut tgt = Vec::new();
    for &i in idx {
        obs.extend_from_slice(&samples[i].obs);
        tgt.extend_from_slice(samples[i].target.data());
    }
    (
        Tensor::new(&[idx.len(), od], obs),
        idx.iter().map(|&i| samples[i].instruction).collect(),
        Tensor::new(&[idx.len(), ts[0], ts[1]], tgt),
    )
}

/// Mean L_2 of `model` over `samples`.
pub fn evaluate_stage2(model: &PredictorModel, samples: &[Stage2Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MotifError::Domain("no samples to evaluate".into()));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(256) {
        let (o, l, t) = batch(samples, chunk);
        total += loss_predictor(&model.predict_motifs(&o, &l)?, &t)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainedStage2 {
    pub model: PredictorModel,
    pub config: Stage2Config,
    pub seed: u64,
    pub log: TrainLog,
    /// Digest of the Stage I parameters the targets came from.
    pub stage1_digest: String,
}

pub fn train_stage2(
    set: &TrainingSet,
    stage1: &TrainedStage1,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<TrainedStage2> {
    let stage1_digest = params_digest(&stage1.model.params);
    let mut samples = stage2_samples(set, stage1, cfg.stride)?;
    if samples.len() < 2 {
        return Err(MotifError::Config("too few Stage II windows in the training set".into()));
    }
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0002));
    let n_val = ((samples.len() as f64 * cfg.val_fraction).round() as usize).min(samples.len() - 1);
    let val = samples.split_off(samples.len() - n_val);

    let mut model_cfg = cfg.model.clone();
    model_cfg.latent_num = stage1.model.config.m;
    model_cfg.d_e = stage1.model.config.d_e;
    model_cfg.vocab = set.corpus().config.vocab();
    model_cfg.obs_dim = OBS_DIM;
    let mut model = PredictorModel::new(&model_cfg, seed)?;
    let mut params = std::mem::take(&mut model.params);
    let log = fit(
        &mut params,
        samples.len(),
        &cfg.train,
        seed,
        |g: &Graph, p, _, idx| {
            let (o, l, t) = batch(&samples, idx);
            let z = model.predict_graph(g, p, &o, &l)?;
            let loss = loss_predictor_graph(g, z, &t);
            let v = g.value(loss).item();
            Ok(StepOutput {
                root: loss,
                loss: v,
                terms: vec![],
            })
        },
        |params, stats| {
            if val.is_empty() {
                return;
            }
            let mut probe = model.clone();
            probe.params = params.clone();
            if let Ok(v) = evaluate_stage2(&probe, &val) {
                stats.terms.push(("val".into(), v));
            }
        },
    )?;
    model.params = params;
    if params_digest(&stage1.model.params) != stage1_digest {
        return Err(MotifError::Config("Stage I parameters changed during Stage II".into()));
    }
    Ok(TrainedStage2 {
        model,
        config: cfg.clone(),
        seed,
        log,
        stage1_digest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Checkpoint {
    pub kind: String,
    pub config: Stage2Config,
    pub model: PredictorConfig,
    pub seed: u64,
    pub epochs: usize,
    pub stage1_digest: String,
    pub log: TrainLog,
}

const KIND: &str = "stage2";

pub fn save_stage2(dir: &Path, trained: &TrainedStage2) -> Result<()> {
    let manifest = Stage2Checkpoint {
        kind: KIND.into(),
        config: trained.config.clone(),
        model: trained.model.config.clone(),
        seed: trained.seed,
        epochs: trained.log.epochs.len(),
        stage1_digest: trained.stage1_digest.clone(),
        log: trained.log.clone(),
    };
    checkpoint::save(dir, &manifest, &trained.model.params)
}

pub fn load_stage2(dir: &Path) -> Result<TrainedStage2> {
    let m: Stage2Checkpoint = checkpoint::load_manifest(dir)?;
    if m.kind != KIND {
        return Err(MotifError::parse(
            dir.display().to_string(),
            format!("expected a {KIND} checkpoint, found {}", m.kind),
        ));
    }
    let mut model = PredictorModel::new(&m.model, m.seed)?;
    checkpoint::load_params(dir, &mut model.params)?;
    Ok(TrainedStage2 {
        model,
        config: m.config,
        seed: m.seed,
        log: m.log,
        stage1_digest: m.stage1_digest,
    })
}
