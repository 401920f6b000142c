//! Minibatch training loop shared by the three stages.

use motif_nn::optim::{clip_grad_norm, AdamW, AdamWConfig, WarmupCosine};
use motif_nn::{Bound, Graph, ParamSet, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MotifError, Result};

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn with_schedule(batch_size: usize, epochs: usize) -> Self {
        Self {
            batch_size,
            epochs,
            lr: 1e-4,
            weight_decay: 0.01,
            warmup_ratio: 0.05,
            grad_clip: 1.0,
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Named loss terms averaged over the epoch.
    pub terms: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Reported loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochStats>,
}

/// What a stage reports for one minibatch.
pub struct StepOutput {
    /// Scalar whose gradient drives the update.
    pub root: Var,
    /// Loss value to log (may differ from the root under gradient reversal).
    pub loss: f64,
    pub terms: Vec<(&'static str, f64)>,
}

/// Runs `epochs` passes over `n` samples in seeded random order. `step`
/// builds the loss of one minibatch on a fresh training graph; `on_epoch`
/// may append extra diagnostics to the epoch record.
pub fn fit(
    params: &mut ParamSet,
    n: usize,
    cfg: &TrainConfig,
    seed: u64,
    mut step: impl FnMut(&Graph, &Bound, &ParamSet, &[usize]) -> Result<StepOutput>,
    mut on_epoch: impl FnMut(&ParamSet, &mut EpochStats),
) -> Result<TrainLog> {
    if n == 0 {
        return Err(MotifError::Config("empty training set".into()));
    }
    let per_epoch = cfg.steps_per_epoch(n);
    let schedule = WarmupCosine::new(cfg.lr, per_epoch * cfg.epochs, cfg.warmup_ratio);
    let mut opt = AdamW::new(
        params,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut global = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut terms: Vec<(String, f64)> = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let g = Graph::training(seed ^ (global as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let bound = params.bind(&g, true);
            let out = step(&g, &bound, params, batch)?;
            if !out.loss.is_finite() {
                return Err(MotifError::Divergence {
                    step: global,
                    detail: format!("loss {} in epoch {epoch}", out.loss),
                });
            }
            let grads = g.backward(out.root);
            let mut grads = bound.grads(&g, &grads);
            let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(MotifError::Divergence {
                    step: global,
                    detail: "non-finite gradient norm".into(),
                });
            }
            opt.step(params, &grads, schedule.lr(global));
            log.step_losses.push(out.loss);
            sum += out.loss;
            for (name, v) in out.terms {
                match terms.iter_mut().find(|(n, _)| n == name) {
                    Some((_, acc)) => *acc += v,
                    None => terms.push((name.to_string(), v)),
                }
            }
            global += 1;
        }
        for (_, v) in terms.iter_mut() {
            *v /= per_epoch as f64;
        }
        let mut stats = EpochStats {
            epoch,
            loss: sum / per_epoch as f64,
            terms,
        };
        on_epoch(params, &mut stats);
        log::info!(
            "epoch {epoch}: loss {:.5} {}",
            stats.loss,
            stats
                .terms
                .iter()
                .map(|(k, v)| format!("{k}={v:.4}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
        log.epochs.push(stats);
    }
    Ok(log)
}
