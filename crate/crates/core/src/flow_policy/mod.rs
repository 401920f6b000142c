//! Stage III: a flow-matching action policy conditioned on retrieved motif
//! codes, with per-embodiment state/action encoders and output heads.

mod model;
mod train;

use motif_nn::Tensor;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

pub use model::{PolicyInput, PolicyModel};
pub use train::{
    condition_motifs, fit_norms, load_stage3, save_stage3, stage3_samples, train_stage3, EmbodimentNorm,
    Stage3Checkpoint, Stage3Config, Stage3Sample, TrainedStage3,
};

use crate::error::{MotifError, Result};
use crate::motif_vq::{quantize, Quantized};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Action horizon H_a.
    pub h_a: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    /// Flow-time sampler Beta(α, β) scaled by `time_scale`.
    pub time_alpha: f64,
    pub time_beta: f64,
    pub time_scale: f64,
    pub inference_steps: usize,
    pub time_buckets: usize,
    pub obs_tokens: usize,
    pub obs_dim: usize,
    pub vocab: usize,
    /// Motif tokens per query and their dimension.
    pub motif_tokens: usize,
    pub d_e: usize,
    pub state_dim: usize,
    /// Action dimension of each embodiment, in corpus order.
    pub action_dims: Vec<usize>,
    /// Include the motif tokens in q_in.
    pub use_motif: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            h_a: 16,
            hidden: 512,
            layers: 16,
            heads: 8,
            ff_mult: 4,
            dropout: 0.2,
            time_alpha: 1.5,
            time_beta: 1.0,
            time_scale: 0.999,
            inference_steps: 4,
            time_buckets: 1000,
            obs_tokens: 8,
            obs_dim: crate::data_synth::OBS_DIM,
            vocab: 4,
            motif_tokens: 16,
            d_e: 256,
            state_dim: 4,
            action_dims: vec![4, 5, 6],
            use_motif: true,
        }
    }
}

impl PolicyConfig {
    pub fn desk() -> Self {
        Self {
            hidden: 64,
            layers: 3,
            heads: 4,
            ff_mult: 2,
            dropout: 0.0,
            d_e: 8,
            ..Self::default()
        }
    }

    pub fn tiny() -> Self {
        Self {
            h_a: 3,
            hidden: 16,
            layers: 2,
            heads: 2,
            ff_mult: 2,
            dropout: 0.0,
            time_buckets: 10,
            obs_tokens: 2,
            obs_dim: 6,
            vocab: 3,
            motif_tokens: 2,
            d_e: 4,
            action_dims: vec![2, 3],
            ..Self::default()
        }
    }

    pub fn max_action_dim(&self) -> usize {
        self.action_dims.iter().copied().max().unwrap_or(0)
    }

    /// Length of q_in: state token, motif tokens (if used), action tokens.
    pub fn query_tokens(&self) -> usize {
        1 + if self.use_motif { self.motif_tokens } else { 0 } + self.h_a
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("h_a", self.h_a),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("inference_steps", self.inference_steps),
            ("time_buckets", self.time_buckets),
            ("obs_tokens", self.obs_tokens),
            ("vocab", self.vocab),
            ("motif_tokens", self.motif_tokens),
            ("d_e", self.d_e),
        ] {
            if v == 0 {
                return Err(MotifError::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(MotifError::Config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.action_dims.is_empty() || self.action_dims.contains(&0) {
            return Err(MotifError::Config("every embodiment needs a positive action dim".into()));
        }
        if !(self.time_scale > 0.0 && self.time_scale <= 1.0) {
            return Err(MotifError::Config(format!(
                "time scale {} outside (0, 1]",
                self.time_scale
            )));
        }
        if !(self.time_alpha > 0.0 && self.time_beta > 0.0) {
            return Err(MotifError::Config("Beta shape parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Nearest codebook entries of predicted tokens; the same map as Stage I
/// quantization.
pub fn retrieve_motifs(z_hat: &Tensor, codebook: &Tensor) -> Result<Quantized> {
    quantize(z_hat, codebook)
}

/// A flow time with its embedding bucket.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowTime {
    pub tau: f64,
    pub bucket: usize,
}

pub fn time_bucket(tau: f64, buckets: usize) -> usize {
    ((tau * buckets as f64).floor().max(0.0) as usize).min(buckets - 1)
}

/// `τ = s·B` with `B ~ Beta(α, β)`.
#[derive(Clone, Debug)]
pub struct FlowTimeSampler {
    dist: Beta<f64>,
    scale: f64,
    buckets: usize,
}

impl FlowTimeSampler {
    pub fn new(alpha: f64, beta: f64, scale: f64, buckets: usize) -> Result<Self> {
        if !(scale > 0.0 && scale <= 1.0) || buckets == 0 {
            return Err(MotifError::Config(format!(
                "invalid flow-time sampler: scale {scale}, {buckets} buckets"
            )));
        }
        let dist = Beta::new(alpha, beta)
            .map_err(|e| MotifError::Config(format!("Beta({alpha}, {beta}): {e}")))?;
        Ok(Self {
            dist,
            scale,
            buckets,
        })
    }

    pub fn from_config(c: &PolicyConfig) -> Result<Self> {
        Self::new(c.time_alpha, c.time_beta, c.time_scale, c.time_buckets)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FlowTime {
        let mut tau = self.scale * self.dist.sample(rng);
        // B = 1 exactly would give τ = s; keep the half-open range.
        if tau >= self.scale {
            tau = self.scale * (1.0 - f64::EPSILON);
        }
        FlowTime {
            tau,
            bucket: time_bucket(tau, self.buckets),
        }
    }
}

/// Draws τ with the sampler settings of `c`.
pub fn sample_flow_time<R: Rng + ?Sized>(rng: &mut R, c: &PolicyConfig) -> Result<FlowTime> {
    Ok(FlowTimeSampler::from_config(c)?.sample(rng))
}

/// `x_τ = (1 − τ)·x0 + τ·x1` and the velocity target `x1 − x0`.
pub fn interpolate_path(x0: &Tensor, x1: &Tensor, tau: f64) -> Result<(Tensor, Tensor)> {
    if x0.shape() != x1.shape() {
        return Err(MotifError::Shape(format!(
            "path endpoints {:?} vs {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(MotifError::Domain(format!("flow time {tau} outside [0, 1]")));
    }
    Ok((
        x0.zip_map(x1, |a, b| (1.0 - tau) * a + tau * b),
        x1.zip_map(x0, |b, a| b - a),
    ))
}

/// Mean squared error between predicted velocity and `x1 − x0` over the
/// entries where `mask` is 1.
pub fn loss_fm(pred: &Tensor, x0: &Tensor, x1: &Tensor, mask: &Tensor) -> Result<f64> {
    if pred.shape() != x0.shape() || x0.shape() != x1.shape() || mask.shape() != x0.shape() {
        return Err(MotifError::Shape("loss_fm operands differ in shape".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..pred.len() {
        let m = mask.data()[i];
        let r = pred.data()[i] - (x1.data()[i] - x0.data()[i]);
        num += m * r * r;
        den += m;
    }
    if den == 0.0 {
        return Err(MotifError::Domain("empty loss mask".into()));
    }
    Ok(num / den)
}

/// Forward Euler on a uniform grid `τ_n = n / steps`.
pub fn euler_integrate(
    x0: &Tensor,
    steps: usize,
    mut field: impl FnMut(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(MotifError::Domain("at least one integration step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    for n in 0..steps {
        let v = field(&x, n as f64 * dt)?;
        if v.shape() != x.shape() {
            return Err(MotifError::Shape(format!(
                "velocity {:?} for state {:?}",
                v.shape(),
                x.shape()
            )));
        }
        x = x.zip_map(&v, |a, b| a + dt * b);
    }
    Ok(x)
}
