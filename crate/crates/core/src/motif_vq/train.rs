use std::path::Path;

use motif_nn::{Graph, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{LossOptions, Stage1Batch, VqModel};
use super::{codebook_perplexity, quantize, MotifEncoderConfig};
use crate::canonicalize::SegmentTransform;
use crate::checkpoint;
use crate::data_synth::{segment_episode, TrainingSet};
use crate::error::{MotifError, Result};
use crate::train::{fit, StepOutput, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub model: MotifEncoderConfig,
    pub train: TrainConfig,
    /// Window stride when segmenting episodes.
    pub stride: usize,
    /// Canonical windows, or globally standardized raw windows.
    pub canonical: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        let model = MotifEncoderConfig::default();
        Self {
            stride: model.h_s / 2,
            model,
            train: TrainConfig::with_schedule(128, 20),
            canonical: true,
        }
    }
}

impl Stage1Config {
    pub fn desk() -> Self {
        let model = MotifEncoderConfig::desk();
        Self {
            stride: model.h_s / 2,
            model,
            train: TrainConfig {
                lr: 3e-4,
                ..TrainConfig::with_schedule(32, 20)
            },
            canonical: true,
        }
    }
}

/// One Stage I training window.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Sample {
    /// `[H_s, d_s]` after the segment transform.
    pub values: Tensor,
    pub progress: f64,
    pub instruction: usize,
    pub embodiment: usize,
    pub task: usize,
}

/// Windows of every episode the split allows. Without `transform`, the
/// transform is derived from `canonical` (fitting standardization
/// statistics on these windows when needed).
pub fn stage1_samples(
    set: &TrainingSet,
    h_s: usize,
    stride: usize,
    canonical: bool,
    transform: Option<&SegmentTransform>,
) -> Result<(Vec<Stage1Sample>, SegmentTransform)> {
    let mut raw = Vec::new();
    for i in 0..set.len() {
        let (e, t, ep) = set.get(i);
        let segs = segment_episode(ep, h_s, stride)?;
        for w in &segs.warnings {
            log::warn!("{w}");
        }
        for s in segs.items {
            raw.push((e, t, s));
        }
    }
    let transform = match transform {
        Some(t) => t.clone(),
        None if canonical => SegmentTransform::Canonical,
        None => {
            let windows: Vec<&Tensor> = raw.iter().map(|(_, _, s)| &s.states).collect();
            SegmentTransform::standardized_from(&windows)
        }
    };
    let cfg = &set.corpus().config;
    let samples = raw
        .into_iter()
        .map(|(e, t, s)| {
            Ok(Stage1Sample {
                values: transform.apply(&s.states, &cfg.embodiments[e])?,
                progress: s.progress,
                instruction: s.instruction,
                embodiment: e,
                task: t,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, transform))
}

pub(crate) fn make_batch(samples: &[Stage1Sample], idx: &[usize]) -> Stage1Batch {
    let mut x = Vec::new();
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(samples[idx[0]].values.shape());
    for &i in idx {
        x.extend_from_slice(samples[i].values.data());
    }
    Stage1Batch {
        x: Tensor::new(&shape, x),
        progress: idx.iter().map(|&i| samples[i].progress).collect(),
        instruction: idx.iter().map(|&i| samples[i].instruction).collect(),
        embodiment: idx.iter().map(|&i| samples[i].embodiment).collect(),
    }
}

/// A trained Stage I model with what is needed to reuse it.
#[derive(Clone, Debug)]
pub struct TrainedStage1 {
    pub model: VqModel,
    pub config: Stage1Config,
    pub transform: SegmentTransform,
    pub embodiments: Vec<String>,
    pub seed: u64,
    pub log: TrainLog,
}

/// Continuous tokens of many windows, batched.
pub fn encode_samples(model: &VqModel, samples: &[Stage1Sample]) -> Result<Tensor> {
    let c = &model.config;
    let mut out = Vec::with_capacity(samples.len() * c.m * c.d_e);
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(256) {
        let b = make_batch(samples, chunk);
        out.extend(model.encode(&b.x, &b.progress)?.into_data());
    }
    Ok(Tensor::new(&[samples.len(), c.m, c.d_e], out))
}

fn init_codebook_from_data(model: &mut VqModel, samples: &[Stage1Sample], seed: u64) -> Result<()> {
    let n = samples.len().min(1024);
    let z = encode_samples(model, &samples[..n])?;
    let d = model.config.d_e;
    let rows = z.len() / d;
    let k = model.config.codebook_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0DE_B00C);
    let picks: Vec<usize> = if rows >= k {
        sample(&mut rng, rows, k).into_vec()
    } else {
        (0..k).map(|i| i % rows).collect()
    };
    let id = model.codebook_id();
    let cb = model.params.get_mut(id);
    for (j, &r) in picks.iter().enumerate() {
        cb.data_mut()[j * d..(j + 1) * d].copy_from_slice(&z.data()[r * d..(r + 1) * d]);
    }
    Ok(())
}

/// Code usage histogram over `samples`.
pub fn code_histogram(model: &VqModel, samples: &[Stage1Sample]) -> Result<Vec<u64>> {
    let z = encode_samples(model, samples)?;
    let q = quantize(&z, model.codebook())?;
    let mut h = vec![0u64; model.config.codebook_size];
    for i in q.indices {
        h[i] += 1;
    }
    Ok(h)
}

pub fn train_stage1(set: &TrainingSet, cfg: &Stage1Config, seed: u64) -> Result<TrainedStage1> {
    let (samples, transform) =
        stage1_samples(set, cfg.model.h_s, cfg.stride, cfg.canonical, None)?;
    if samples.is_empty() {
        return Err(MotifError::Config("no Stage I windows in the training set".into()));
    }
    let corpus_cfg = &set.corpus().config;
    let mut model_cfg = cfg.model.clone();
    model_cfg.num_embodiments = corpus_cfg.embodiments.len();
    let mut model = VqModel::new(&model_cfg, seed)?;
    init_codebook_from_data(&mut model, &samples, seed)?;
    let probe: Vec<Stage1Sample> = samples.iter().step_by((samples.len() / 512).max(1)).cloned().collect();

    let mut params = std::mem::take(&mut model.params);
    let log = fit(
        &mut params,
        samples.len(),
        &cfg.train,
        seed,
        |g: &Graph, p, _, idx| {
            let batch = make_batch(&samples, idx);
            let out = model.loss_graph(g, p, &batch, &LossOptions::default())?;
            let t = &out.terms;
            Ok(StepOutput {
                root: out.root,
                loss: t.total,
                terms: vec![
                    ("recon", t.recon),
                    ("vq", t.vq),
                    ("nce", t.nce),
                    ("adv", t.adv),
                ],
            })
        },
        |params, stats| {
            let mut probe_model = model.clone();
            probe_model.params = params.clone();
            if let Ok(h) = code_histogram(&probe_model, &probe) {
                if let Ok(ppl) = codebook_perplexity(&h) {
                    stats.terms.push(("perplexity".into(), ppl));
                }
            }
        },
    )?;
    model.params = params;
    Ok(TrainedStage1 {
        model,
        config: cfg.clone(),
        transform,
        embodiments: corpus_cfg.embodiments.iter().map(|e| e.id.clone()).collect(),
        seed,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Eval {
    pub recon_mse: f64,
    pub codes_used: usize,
    pub perplexity: f64,
    pub histogram: Vec<u64>,
}

/// Quantized reconstruction error and code usage on `samples`.
pub fn evaluate_stage1(model: &VqModel, samples: &[Stage1Sample]) -> Result<Stage1Eval> {
    if samples.is_empty() {
        return Err(MotifError::Domain("no windows to evaluate".into()));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut histogram = vec![0u64; model.config.codebook_size];
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(256) {
        let b = make_batch(samples, chunk);
        let (x_hat, codes) = model.reconstruct(&b.x, &b.progress)?;
        sq += x_hat.data().iter().zip(b.x.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += b.x.len();
        for c in codes {
            histogram[c] += 1;
        }
    }
    Ok(Stage1Eval {
        recon_mse: sq / count as f64,
        codes_used: histogram.iter().filter(|&&c| c > 0).count(),
        perplexity: codebook_perplexity(&histogram)?,
        histogram,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    /// Mean cosine of same-task pairs with `|Δp| ≤ 0.1`.
    pub near: f64,
    /// Mean cosine of same-task pairs with `|Δp| ≥ 0.5`.
    pub far: f64,
    pub near_pairs: usize,
    pub far_pairs: usize,
}

impl AlignmentStats {
    pub fn gap(&self) -> f64 {
        self.near - self.far
    }
}

/// Cosine similarity of the unit window means `ê` for same-task pairs at
/// close and at distant progress.
pub fn progress_alignment(model: &VqModel, samples: &[Stage1Sample]) -> Result<AlignmentStats> {
    let z = encode_samples(model, samples)?;
    let (m, d) = (model.config.m, model.config.d_e);
    let e: Vec<Vec<f64>> = (0..samples.len())
        .map(|i| {
            let mut v = vec![0.0; d];
            for t in 0..m {
                for (a, b) in v.iter_mut().zip(z.row(i * m + t)) {
                    *a += b / m as f64;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= n);
            v
        })
        .collect();
    let (mut near, mut far, mut nn, mut nf) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            if samples[i].instruction != samples[j].instruction {
                continue;
            }
            let dp = (samples[i].progress - samples[j].progress).abs();
            let cos: f64 = e[i].iter().zip(&e[j]).map(|(a, b)| a * b).sum();
            if dp <= 0.1 {
                near += cos;
                nn += 1;
            } else if dp >= 0.5 {
                far += cos;
                nf += 1;
            }
        }
    }
    if nn == 0 || nf == 0 {
        return Err(MotifError::Domain("no same-task pairs in one of the progress bands".into()));
    }
    Ok(AlignmentStats {
        near: near / nn as f64,
        far: far / nf as f64,
        near_pairs: nn,
        far_pairs: nf,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Checkpoint {
    pub kind: String,
    pub config: Stage1Config,
    pub model: MotifEncoderConfig,
    pub seed: u64,
    pub epochs: usize,
    pub transform: SegmentTransform,
    pub embodiments: Vec<String>,
    pub log: TrainLog,
}

const KIND: &str = "stage1";

pub fn save_stage1(dir: &Path, trained: &TrainedStage1) -> Result<()> {
    let manifest = Stage1Checkpoint {
        kind: KIND.into(),
        config: trained.config.clone(),
        model: trained.model.config.clone(),
        seed: trained.seed,
        epochs: trained.log.epochs.len(),
        transform: trained.transform.clone(),
        embodiments: trained.embodiments.clone(),
        log: trained.log.clone(),
    };
    checkpoint::save(dir, &manifest, &trained.model.params)
}

pub fn load_stage1(dir: &Path) -> Result<TrainedStage1> {
    let m: Stage1Checkpoint = checkpoint::load_manifest(dir)?;
    if m.kind != KIND {
        return Err(MotifError::parse(
            dir.display().to_string(),
            format!("expected a {KIND} checkpoint, found {}", m.kind),
        ));
    }
    let mut model = VqModel::new(&m.model, m.seed)?;
    checkpoint::load_params(dir, &mut model.params)?;
    Ok(TrainedStage1 {
        model,
        config: m.config,
        transform: m.transform,
        embodiments: m.embodiments,
        seed: m.seed,
        log: m.log,
    })
}
