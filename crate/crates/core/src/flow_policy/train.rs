use std::path::Path;

use motif_nn::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{retrieve_motifs, FlowTimeSampler, PolicyConfig, PolicyInput, PolicyModel};
use crate::checkpoint::{self, params_digest};
use crate::data_synth::{TrainingSet, OBS_DIM, STATE_DIM};
use crate::error::{MotifError, Result};
use crate::motif_predictor::TrainedStage2;
use crate::motif_vq::TrainedStage1;
use crate::train::{fit, StepOutput, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage3Config {
    pub model: PolicyConfig,
    pub train: TrainConfig,
    /// Spacing of chunk start times within an episode.
    pub stride: usize,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            model: PolicyConfig::default(),
            train: TrainConfig::with_schedule(128, 60),
            stride: 1,
        }
    }
}

impl Stage3Config {
    pub fn desk() -> Self {
        Self {
            model: PolicyConfig::desk(),
            train: TrainConfig {
                lr: 3e-3,
                ..TrainConfig::with_schedule(32, 12)
            },
            stride: 8,
        }
    }
}

/// Per-embodiment standardization of states and actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentNorm {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-4;

fn moments(rows: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(*r) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(*r).zip(&mean) {
            *v += (x - m).powi(2) / n;
        }
    }
    (mean, var.into_iter().map(|v| v.sqrt().max(STD_FLOOR)).collect())
}

impl EmbodimentNorm {
    pub fn identity(action_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; STATE_DIM],
            state_std: vec![1.0; STATE_DIM],
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
        }
    }

    pub fn state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(&self.state_mean)
            .zip(&self.state_std)
            .map(|((x, m), sd)| (x - m) / sd)
            .collect()
    }

    pub fn action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(&self.action_mean)
            .zip(&self.action_std)
            .map(|((x, m), sd)| (x - m) / sd)
            .collect()
    }

    pub fn unnormalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(&self.action_mean)
            .zip(&self.action_std)
            .map(|((x, m), sd)| x * sd + m)
            .collect()
    }
}

/// One chunk-prediction example in raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage3Sample {
    pub embodiment: usize,
    pub task: usize,
    pub instruction: usize,
    pub state: Vec<f64>,
    pub obs: Vec<f64>,
    /// `[H_a, action_dim]`, padded past the episode end with its final
    /// (holding) action.
    pub chunk: Tensor,
    /// `[M, d_e]` retrieved motif entries, when the policy uses them.
    pub motifs: Option<Tensor>,
}

/// Frozen Stage I/II conditioning: predicted tokens snapped to the
/// codebook, `[B, M, d_e]`.
pub fn condition_motifs(
    stage1: &TrainedStage1,
    stage2: &TrainedStage2,
    obs: &Tensor,
    instruction: &[usize],
) -> Result<Tensor> {
    let z = stage2.model.predict_motifs(obs, instruction)?;
    let (b, m, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let q = retrieve_motifs(&z.reshape(&[b * m, d]), stage1.model.codebook())?;
    Ok(q.values.reshape(&[b, m, d]))
}

pub fn stage3_samples(
    set: &TrainingSet,
    h_a: usize,
    stride: usize,
    conditioning: Option<(&TrainedStage1, &TrainedStage2)>,
) -> Result<Vec<Stage3Sample>> {
    if stride == 0 || h_a == 0 {
        return Err(MotifError::Config("chunk stride and horizon must be positive".into()));
    }
    let mut out = Vec::new();
    for i in 0..set.len() {
        let (e, t, ep) = set.get(i);
        let len = ep.len();
        let a_dim = ep.actions.shape()[1];
        for start in (0..len).step_by(stride) {
            let mut chunk = Vec::with_capacity(h_a * a_dim);
            for k in 0..h_a {
                chunk.extend_from_slice(ep.actions.row((start + k).min(len - 1)));
            }
            out.push(Stage3Sample {
                embodiment: e,
                task: t,
                instruction: ep.instruction,
                state: ep.states.row(start).to_vec(),
                obs: ep.observations.row(start).to_vec(),
                chunk: Tensor::new(&[h_a, a_dim], chunk),
                motifs: None,
            });
        }
    }
    if let Some((s1, s2)) = conditioning {
        for block in out.chunks_mut(256) {
            let obs: Vec<f64> = block.iter().flat_map(|s| s.obs.iter().copied()).collect();
            let obs = Tensor::new(&[block.len(), OBS_DIM], obs);
            let instr: Vec<usize> = block.iter().map(|s| s.instruction).collect();
            let z = condition_motifs(s1, s2, &obs, &instr)?;
            let per = z.len() / block.len();
            let shape = &z.shape()[1..];
            for (j, s) in block.iter_mut().enumerate() {
                s.motifs = Some(Tensor::new(shape, z.data()[j * per..(j + 1) * per].to_vec()));
            }
        }
    }
    Ok(out)
}

pub fn fit_norms(samples: &[Stage3Sample], action_dims: &[usize]) -> Vec<EmbodimentNorm> {
    action_dims
        .iter()
        .enumerate()
        .map(|(e, &a_dim)| {
            let mine: Vec<&Stage3Sample> = samples.iter().filter(|s| s.embodiment == e).collect();
            if mine.is_empty() {
                return EmbodimentNorm::identity(a_dim);
            }
            let states: Vec<&[f64]> = mine.iter().map(|s| s.state.as_slice()).collect();
            let actions: Vec<&[f64]> = mine.iter().map(|s| s.chunk.row(0)).collect();
            let (state_mean, state_std) = moments(&states, STATE_DIM);
            let (action_mean, action_std) = moments(&actions, a_dim);
            EmbodimentNorm {
                state_mean,
                state_std,
                action_mean,
                action_std,
            }
        })
        .collect()
}

/// Normalized batch tensors: states, observations, padded chunks and the
/// valid-entry mask.
pub(crate) struct Stage3Batch {
    pub embodiment: Vec<usize>,
    pub instruction: Vec<usize>,
    pub state: Tensor,
    pub obs: Tensor,
    pub chunk: Tensor,
    pub mask: Tensor,
    pub motifs: Option<Tensor>,
}

pub(crate) fn make_batch(
    samples: &[Stage3Sample],
    idx: &[usize],
    norms: &[EmbodimentNorm],
    cfg: &PolicyConfig,
) -> Stage3Batch {
    let b = idx.len();
    let a_max = cfg.max_action_dim();
    let mut state = Vec::with_capacity(b * STATE_DIM);
    let mut obs = Vec::with_capacity(b * OBS_DIM);
    let mut chunk = Vec::with_capacity(b * cfg.h_a * a_max);
    let mut mask = Vec::with_capacity(b * cfg.h_a * a_max);
    let mut motifs = Vec::new();
    for &i in idx {
        let s = &samples[i];
        let n = &norms[s.embodiment];
        state.extend(n.state(&s.state));
        obs.extend_from_slice(&s.obs);
        let a_dim = s.chunk.shape()[1];
        for k in 0..cfg.h_a {
            let a = n.action(s.chunk.row(k));
            chunk.extend(&a);
            chunk.extend(std::iter::repeat_n(0.0, a_max - a_dim));
            mask.extend(std::iter::repeat_n(1.0, a_dim));
            mask.extend(std::iter::repeat_n(0.0, a_max - a_dim));
        }
        if let Some(m) = &s.motifs {
            motifs.extend_from_slice(m.data());
        }
    }
    let motifs = (cfg.use_motif && !motifs.is_empty())
        .then(|| Tensor::new(&[b, cfg.motif_tokens, cfg.d_e], motifs));
    Stage3Batch {
        embodiment: idx.iter().map(|&i| samples[i].embodiment).collect(),
        instruction: idx.iter().map(|&i| samples[i].instruction).collect(),
        state: Tensor::new(&[b, STATE_DIM], state),
        obs: Tensor::new(&[b, samples[idx[0]].obs.len()], obs),
        chunk: Tensor::new(&[b, cfg.h_a, a_max], chunk),
        mask: Tensor::new(&[b, cfg.h_a, a_max], mask),
        motifs,
    }
}

#[derive(Clone, Debug)]
pub struct TrainedStage3 {
    pub model: PolicyModel,
    pub config: Stage3Config,
    pub norms: Vec<EmbodimentNorm>,
    pub seed: u64,
    pub log: TrainLog,
    /// Digests of the frozen Stage I and II parameters, when conditioned.
    pub upstream_digests: Option<(String, String)>,
}

/// Trains the policy. With `conditioning` absent the policy is built
/// without motif tokens regardless of `cfg.model.use_motif`.
pub fn train_stage3(
    set: &TrainingSet,
    conditioning: Option<(&TrainedStage1, &TrainedStage2)>,
    cfg: &Stage3Config,
    seed: u64,
) -> Result<TrainedStage3> {
    let corpus = &set.corpus().config;
    let mut model_cfg = cfg.model.clone();
    model_cfg.use_motif = cfg.model.use_motif && conditioning.is_some();
    model_cfg.action_dims = corpus.embodiments.iter().map(|e| e.action_dim).collect();
    model_cfg.vocab = corpus.vocab();
    model_cfg.obs_dim = OBS_DIM;
    model_cfg.state_dim = STATE_DIM;
    let conditioning = conditioning.filter(|_| model_cfg.use_motif);
    if let Some((s1, s2)) = conditioning {
        model_cfg.motif_tokens = s1.model.config.m;
        model_cfg.d_e = s1.model.config.d_e;
        if s2.stage1_digest != params_digest(&s1.model.params) {
            return Err(MotifError::Config("Stage II was trained against a different Stage I".into()));
        }
    }
    let digests = conditioning.map(|(s1, s2)| (params_digest(&s1.model.params), params_digest(&s2.model.params)));

    let samples = stage3_samples(set, model_cfg.h_a, cfg.stride, conditioning)?;
    if samples.is_empty() {
        return Err(MotifError::Config("no Stage III samples in the training set".into()));
    }
    let norms = fit_norms(&samples, &model_cfg.action_dims);
    let mut model = PolicyModel::new(&model_cfg, seed)?;
    let sampler = FlowTimeSampler::from_config(&model_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0003);
    let mut params = std::mem::take(&mut model.params);
    let log = fit(
        &mut params,
        samples.len(),
        &cfg.train,
        seed,
        |g: &Graph, p, _, idx| {
            let batch = make_batch(&samples, idx, &norms, &model_cfg);
            let times: Vec<_> = idx.iter().map(|_| sampler.sample(&mut rng)).collect();
            let per = model_cfg.h_a * model_cfg.max_action_dim();
            let x0 = Tensor::from_fn(batch.chunk.shape(), |i| {
                batch.mask.data()[i] * Distribution::<f64>::sample(&StandardNormal, &mut rng)
            });
            let mut x_tau = batch.chunk.clone();
            let mut target = batch.chunk.clone();
            for (i, ((xt, u), x)) in x_tau
                .data_mut()
                .iter_mut()
                .zip(target.data_mut())
                .zip(x0.data())
                .enumerate()
            {
                let tau = times[i / per].tau;
                *xt = (1.0 - tau) * *x + tau * *xt;
                *u -= x;
            }
            let input = PolicyInput {
                embodiment: &batch.embodiment,
                state: &batch.state,
                obs: &batch.obs,
                instruction: &batch.instruction,
                motifs: batch.motifs.as_ref(),
            };
            let buckets: Vec<usize> = times.iter().map(|t| t.bucket).collect();
            let v = model.velocity_graph(g, p, &input, &x_tau, &buckets)?;
            let r = g.sub(v, g.constant(target));
            let sq = g.mul(g.sqr(r), g.constant(batch.mask.clone()));
            let root = g.scale(g.sum(sq), 1.0 / batch.mask.sum());
            let loss = g.value(root).item();
            Ok(StepOutput {
                root,
                loss,
                terms: vec![],
            })
        },
        |_, _| {},
    )?;
    model.params = params;
    if let (Some((s1, s2)), Some((d1, d2))) = (conditioning, &digests) {
        if &params_digest(&s1.model.params) != d1 || &params_digest(&s2.model.params) != d2 {
            return Err(MotifError::Config("frozen stages changed during Stage III".into()));
        }
    }
    Ok(TrainedStage3 {
        model,
        config: cfg.clone(),
        norms,
        seed,
        log,
        upstream_digests: digests,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage3Checkpoint {
    pub kind: String,
    pub config: Stage3Config,
    pub model: PolicyConfig,
    pub norms: Vec<EmbodimentNorm>,
    pub seed: u64,
    pub epochs: usize,
    pub upstream_digests: Option<(String, String)>,
    pub log: TrainLog,
}

const KIND: &str = "stage3";

pub fn save_stage3(dir: &Path, trained: &TrainedStage3) -> Result<()> {
    let manifest = Stage3Checkpoint {
        kind: KIND.into(),
        config: trained.config.clone(),
        model: trained.model.config.clone(),
        norms: trained.norms.clone(),
        seed: trained.seed,
        epochs: trained.log.epochs.len(),
        upstream_digests: trained.upstream_digests.clone(),
        log: trained.log.clone(),
    };
    checkpoint::save(dir, &manifest, &trained.model.params)
}

pub fn load_stage3(dir: &Path) -> Result<TrainedStage3> {
    let m: Stage3Checkpoint = checkpoint::load_manifest(dir)?;
    if m.kind != KIND {
        return Err(MotifError::parse(
            dir.display().to_string(),
            format!("expected a {KIND} checkpoint, found {}", m.kind),
        ));
    }
    let mut model = PolicyModel::new(&m.model, m.seed)?;
    checkpoint::load_params(dir, &mut model.params)?;
    Ok(TrainedStage3 {
        model,
        config: m.config,
        norms: m.norms,
        seed: m.seed,
        log: m.log,
        upstream_digests: m.upstream_digests,
    })
}
