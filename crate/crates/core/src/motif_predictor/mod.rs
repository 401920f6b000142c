//! Stage II: a latent cross-attention resampler that predicts continuous
//! motif tokens from an observation and an instruction, regressed onto the
//! frozen Stage I encoder.

mod train;

use motif_nn::layers::{Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use motif_nn::{Bound, Graph, ParamBuilder, ParamId, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use train::{
    evaluate_stage2, load_stage2, save_stage2, stage2_samples, train_stage2, Stage2Checkpoint, Stage2Config,
    Stage2Sample, TrainedStage2,
};

use crate::data_synth::OBS_DIM;
use crate::error::{MotifError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub resampler_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim_head: usize,
    /// Number of latent queries, equal to Stage I's M.
    pub latent_num: usize,
    /// Output token dim, equal to Stage I's d_e.
    pub d_e: usize,
    pub ff_mult: usize,
    /// Tokens produced from one observation vector.
    pub obs_tokens: usize,
    pub obs_dim: usize,
    /// Instruction vocabulary size.
    pub vocab: usize,
    pub dropout: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            resampler_dim: 512,
            depth: 6,
            heads: 8,
            dim_head: 64,
            latent_num: 16,
            d_e: 256,
            ff_mult: 4,
            obs_tokens: 8,
            obs_dim: OBS_DIM,
            vocab: 4,
            dropout: 0.0,
        }
    }
}

impl PredictorConfig {
    pub fn desk() -> Self {
        Self {
            resampler_dim: 64,
            depth: 2,
            heads: 4,
            dim_head: 16,
            d_e: 8,
            ff_mult: 2,
            ..Self::default()
        }
    }

    pub fn tiny() -> Self {
        Self {
            resampler_dim: 8,
            depth: 1,
            heads: 2,
            dim_head: 4,
            latent_num: 2,
            d_e: 4,
            ff_mult: 2,
            obs_tokens: 2,
            obs_dim: 6,
            vocab: 3,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("resampler_dim", self.resampler_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("dim_head", self.dim_head),
            ("latent_num", self.latent_num),
            ("d_e", self.d_e),
            ("obs_tokens", self.obs_tokens),
            ("obs_dim", self.obs_dim),
            ("vocab", self.vocab),
        ] {
            if v == 0 {
                return Err(MotifError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Observation and instruction features with a learned source tag:
/// `obs_tokens` observation tokens followed by one instruction token.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    obs_hidden: Linear,
    obs_out: Linear,
    obs_pos: ParamId,
    instr: Embedding,
    instr_proj: Linear,
    source: ParamId,
    pub obs_dim: usize,
    pub obs_tokens: usize,
    pub vocab: usize,
    pub dim: usize,
}

impl ContextEncoder {
    pub fn new(pb: &mut ParamBuilder, obs_dim: usize, obs_tokens: usize, vocab: usize, dim: usize) -> Self {
        Self {
            obs_hidden: Linear::new(&mut pb.sub("obs.hidden"), obs_dim, 2 * dim),
            obs_out: Linear::new(&mut pb.sub("obs.out"), 2 * dim, obs_tokens * dim),
            obs_pos: pb.normal("obs.pos", &[obs_tokens, dim], 0.1),
            instr: Embedding::new(&mut pb.sub("instr.table"), vocab, dim, 1.0),
            instr_proj: Linear::new(&mut pb.sub("instr.proj"), dim, dim),
            source: pb.normal("source", &[2, dim], 0.1),
            obs_dim,
            obs_tokens,
            vocab,
            dim,
        }
    }

    fn check(&self, obs: &Tensor, instr: &[usize]) -> Result<()> {
        if obs.rank() != 2 || obs.shape()[1] != self.obs_dim {
            return Err(MotifError::Shape(format!(
                "expected [B, {}] observations, got {:?}",
                self.obs_dim,
                obs.shape()
            )));
        }
        if instr.len() != obs.shape()[0] {
            return Err(MotifError::Shape(format!(
                "{} instructions for {} observations",
                instr.len(),
                obs.shape()[0]
            )));
        }
        if let Some(&bad) = instr.iter().find(|&&l| l >= self.vocab) {
            return Err(MotifError::Domain(format!(
                "instruction {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        Ok(())
    }

    /// `[B, obs_tokens, dim]`.
    pub fn observation_graph(&self, g: &Graph, p: &Bound, obs: &Tensor) -> Var {
        let b = obs.shape()[0];
        let h = g.gelu(self.obs_hidden.forward(g, p, g.constant(obs.clone())));
        let h = self.obs_out.forward(g, p, h);
        let h = g.reshape(h, &[b, self.obs_tokens, self.dim]);
        let h = g.add_trailing(h, p.var(self.obs_pos));
        let tag = g.narrow(p.var(self.source), 0, 0, 1);
        g.add_trailing(h, g.reshape(tag, &[self.dim]))
    }

    /// `[B, 1, dim]`.
    pub fn instruction_graph(&self, g: &Graph, p: &Bound, instr: &[usize]) -> Var {
        let h = self.instr_proj.forward(g, p, self.instr.forward(g, p, instr));
        let tag = g.narrow(p.var(self.source), 0, 1, 1);
        let h = g.add_trailing(h, g.reshape(tag, &[self.dim]));
        g.reshape(h, &[instr.len(), 1, self.dim])
    }

    /// Fused features `[B, obs_tokens + 1, dim]`.
    pub fn forward(&self, g: &Graph, p: &Bound, obs: &Tensor, instr: &[usize]) -> Result<Var> {
        self.check(obs, instr)?;
        let o = self.observation_graph(g, p, obs);
        let l = self.instruction_graph(g, p, instr);
        Ok(g.concat(&[o, l], 1))
    }
}

#[derive(Clone, Debug)]
struct ResamplerBlock {
    norm_ctx: LayerNorm,
    norm_lat: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct PredictorModel {
    pub config: PredictorConfig,
    pub params: ParamSet,
    pub context: ContextEncoder,
    latents: ParamId,
    blocks: Vec<ResamplerBlock>,
    out_norm: LayerNorm,
    out: Linear,
}

impl PredictorModel {
    pub fn new(config: &PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.resampler_dim;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let context = ContextEncoder::new(&mut pb.sub("context"), c.obs_dim, c.obs_tokens, c.vocab, d);
        let latents = pb.normal("latents", &[c.latent_num, d], 1.0);
        let blocks = (0..c.depth)
            .map(|i| {
                let mut b = pb.sub(&format!("block{i}"));
                ResamplerBlock {
                    norm_ctx: LayerNorm::new(&mut b.sub("norm_ctx"), d),
                    norm_lat: LayerNorm::new(&mut b.sub("norm_lat"), d),
                    attn: MultiHeadAttention::new(&mut b.sub("attn"), d, d, c.heads, c.dim_head),
                    norm_ff: LayerNorm::new(&mut b.sub("norm_ff"), d),
                    ff: FeedForward::new(&mut b.sub("ff"), d, d * c.ff_mult),
                }
            })
            .collect();
        let out_norm = LayerNorm::new(&mut pb.sub("out_norm"), d);
        let out = Linear::new(&mut pb.sub("out"), d, c.d_e);
        Ok(Self {
            config: c.clone(),
            params,
            context,
            latents,
            blocks,
            out_norm,
            out,
        })
    }

    /// Latent queries cross-attending to `features` `[B, T, dim]`; each
    /// block attends over the features and the latents together.
    pub fn resample_graph(&self, g: &Graph, p: &Bound, features: Var) -> Var {
        let c = &self.config;
        let b = g.shape(features)[0];
        let mut x = g.broadcast_axis(p.var(self.latents), 0, b);
        let drop = if g.is_training() { c.dropout } else { 0.0 };
        for blk in &self.blocks {
            let ctx = blk.norm_ctx.forward(g, p, features);
            let q = blk.norm_lat.forward(g, p, x);
            let kv = g.concat(&[ctx, q], 1);
            let h = blk.attn.forward(g, p, q, kv, None);
            x = g.add(x, g.dropout(h, drop));
            let h = blk.ff.forward(g, p, blk.norm_ff.forward(g, p, x), drop);
            x = g.add(x, g.dropout(h, drop));
        }
        self.out.forward(g, p, self.out_norm.forward(g, p, x))
    }

    /// Predicted tokens `ẑ` `[B, M, d_e]`.
    pub fn predict_graph(&self, g: &Graph, p: &Bound, obs: &Tensor, instr: &[usize]) -> Result<Var> {
        let f = self.context.forward(g, p, obs, instr)?;
        Ok(self.resample_graph(g, p, f))
    }

    pub fn predict_motifs(&self, obs: &Tensor, instr: &[usize]) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let z = self.predict_graph(&g, &p, obs, instr)?;
        let out = g.value(z).clone();
        Ok(out)
    }

    pub fn encode_observation(&self, obs: &Tensor) -> Result<Tensor> {
        let b = obs.shape().first().copied().unwrap_or(0);
        self.context.check(obs, &vec![0; b])?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let v = self.context.observation_graph(&g, &p, obs);
        let out = g.value(v).clone();
        Ok(out)
    }

    pub fn encode_instruction(&self, instr: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = instr.iter().find(|&&l| l >= self.config.vocab) {
            return Err(MotifError::Domain(format!(
                "instruction {bad} outside vocabulary of {}",
                self.config.vocab
            )));
        }
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let v = self.context.instruction_graph(&g, &p, instr);
        let out = g.value(v).clone();
        Ok(out)
    }
}

/// Mean over tokens of the per-element mean squared error.
pub fn loss_predictor(z_hat: &Tensor, target: &Tensor) -> Result<f64> {
    if z_hat.shape() != target.shape() || z_hat.is_empty() {
        return Err(MotifError::Shape(format!(
            "prediction {:?} vs target {:?}",
            z_hat.shape(),
            target.shape()
        )));
    }
    Ok(z_hat
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / z_hat.len() as f64)
}

/// Graph form of [`loss_predictor`]; `target` enters as a constant.
pub fn loss_predictor_graph(g: &Graph, z_hat: Var, target: &Tensor) -> Var {
    g.mean(g.sqr(g.sub(z_hat, g.constant(target.clone()))))
}
