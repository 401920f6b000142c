//! Stage I: a local-attention VQ autoencoder over canonical state windows,
//! trained with progress-weighted contrastive alignment and an adversarial
//! embodiment discriminator behind gradient reversal.

mod model;
mod train;

use std::f64::consts::PI;

use motif_nn::Tensor;
use serde::{Deserialize, Serialize};

pub use model::{LossOptions, Snapshot, Stage1Batch, Stage1Graph, Stage1Terms, VqModel};
pub use train::{
    code_histogram, encode_samples, evaluate_stage1, load_stage1, progress_alignment, save_stage1, stage1_samples, train_stage1,
    AlignmentStats, Stage1Checkpoint, Stage1Config, Stage1Eval, Stage1Sample, TrainedStage1,
};

use crate::error::{MotifError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotifEncoderConfig {
    /// Window length H_s.
    pub h_s: usize,
    /// Tokens per window M.
    pub m: usize,
    pub d_model: usize,
    pub d_e: usize,
    /// Codebook size K.
    pub codebook_size: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    /// Attention half-width k.
    pub local_k: usize,
    pub beta: f64,
    pub lambda_nce: f64,
    pub lambda_adv: f64,
    /// Progress tolerance σ of the contrastive weights.
    pub sigma: f64,
    /// Contrastive temperature γ.
    pub gamma: f64,
    pub state_dim: usize,
    pub num_embodiments: usize,
}

impl Default for MotifEncoderConfig {
    fn default() -> Self {
        Self {
            h_s: 32,
            m: 16,
            d_model: 256,
            d_e: 256,
            codebook_size: 128,
            enc_layers: 4,
            dec_layers: 4,
            heads: 8,
            ff_mult: 4,
            dropout: 0.1,
            conv_kernels: vec![5, 3],
            conv_strides: vec![2, 1],
            local_k: 8,
            beta: 0.25,
            lambda_nce: 0.1,
            lambda_adv: 0.1,
            sigma: 0.1,
            gamma: 0.1,
            state_dim: 4,
            num_embodiments: 3,
        }
    }
}

impl MotifEncoderConfig {
    /// Narrow variant for single-core runs; window, token count, codebook
    /// size and loss weights are unchanged. A small code dimension keeps
    /// more of the codebook in use.
    pub fn desk() -> Self {
        Self {
            d_model: 48,
            d_e: 8,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ff_mult: 2,
            ..Self::default()
        }
    }

    /// Smallest config used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            h_s: 8,
            m: 2,
            d_model: 8,
            d_e: 4,
            codebook_size: 4,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ff_mult: 2,
            dropout: 0.0,
            conv_kernels: vec![3, 3],
            conv_strides: vec![2, 2],
            local_k: 2,
            ..Self::default()
        }
    }

    /// Sequence length after the strided convolutions.
    pub fn conv_out_len(&self) -> usize {
        let mut t = self.h_s;
        for (&k, &s) in self.conv_kernels.iter().zip(&self.conv_strides) {
            t = (t + 2 * (k / 2) - k) / s + 1;
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("h_s", self.h_s),
            ("m", self.m),
            ("d_model", self.d_model),
            ("d_e", self.d_e),
            ("codebook_size", self.codebook_size),
            ("heads", self.heads),
            ("ff_mult", self.ff_mult),
            ("state_dim", self.state_dim),
            ("num_embodiments", self.num_embodiments),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(MotifError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(MotifError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.conv_kernels.len() != self.conv_strides.len() || self.conv_kernels.is_empty() {
            return Err(MotifError::Config(
                "conv_kernels and conv_strides must be non-empty and equally long".into(),
            ));
        }
        if self.conv_kernels.iter().chain(&self.conv_strides).any(|&v| v == 0) {
            return Err(MotifError::Config("conv kernels and strides must be positive".into()));
        }
        if self.conv_out_len() < self.m {
            return Err(MotifError::Config(format!(
                "convolutions reduce {} steps to {}, fewer than M = {}",
                self.h_s,
                self.conv_out_len(),
                self.m
            )));
        }
        if !(self.sigma > 0.0) || !(self.gamma > 0.0) {
            return Err(MotifError::Config("σ and γ must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of progress `p ∈ [0, 1]`: sines then cosines at
/// frequencies spaced geometrically from π/2 to 32π.
pub fn progress_pe(p: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MotifError::Domain(format!("progress {p} outside [0, 1]")));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(MotifError::Domain(format!(
            "encoding dimension {dim} must be positive and even"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let frac = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let w = 0.5 * PI * 64f64.powf(frac);
        out[i] = (w * p).sin();
        out[half + i] = (w * p).cos();
    }
    Ok(out)
}

/// `mask[t * len + u]` is true iff `|t − u| ≤ k`.
pub fn local_attention_mask(len: usize, k: usize) -> Vec<bool> {
    (0..len * len)
        .map(|i| (i / len).abs_diff(i % len) <= k)
        .collect()
}

/// Quantized tokens: indices and the selected code rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub indices: Vec<usize>,
    /// `[N, d_e]`, exact copies of codebook rows.
    pub values: Tensor,
}

/// Nearest code (Euclidean) for each row of `z` (`[N, d_e]`, or any shape
/// whose last axis is `d_e`); ties go to the lowest index.
pub fn quantize(z: &Tensor, codebook: &Tensor) -> Result<Quantized> {
    if codebook.rank() != 2 || codebook.shape()[0] == 0 {
        return Err(MotifError::Domain("empty codebook".into()));
    }
    let d = codebook.shape()[1];
    if z.last_dim() != d {
        return Err(MotifError::Shape(format!(
            "token dim {} does not match code dim {d}",
            z.last_dim()
        )));
    }
    let k = codebook.shape()[0];
    let n = z.len() / d;
    let mut indices = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * d);
    for row in z.data().chunks(d) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..k {
            let c = codebook.row(j);
            let dist: f64 = row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_d {
                best_d = dist;
                best = j;
            }
        }
        indices.push(best);
        values.extend_from_slice(codebook.row(best));
    }
    let mut shape = z.shape().to_vec();
    if shape.is_empty() {
        shape.push(d);
    }
    Ok(Quantized {
        indices,
        values: Tensor::new(&shape, values),
    })
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

/// `mean(x − x̂)² + mean(sg(z_e) − z_q)² + β·mean(z_e − sg(z_q))²`; the
/// value of the two latent terms coincides, the stop-gradients only route
/// gradients.
pub fn loss_vq(x: &Tensor, x_hat: &Tensor, z_e: &Tensor, z_q: &Tensor, beta: f64) -> Result<f64> {
    if x.shape() != x_hat.shape() || z_e.shape() != z_q.shape() {
        return Err(MotifError::Shape(format!(
            "loss_vq shapes {:?}/{:?} and {:?}/{:?}",
            x.shape(),
            x_hat.shape(),
            z_e.shape(),
            z_q.shape()
        )));
    }
    let latent = mse(z_e, z_q);
    Ok(mse(x, x_hat) + latent + beta * latent)
}

/// `1[l_i = l_j] · exp(−((p_i − p_j)/σ)²)`.
pub fn progress_weight(l_i: usize, l_j: usize, p_i: f64, p_j: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(MotifError::Domain(format!("σ must be positive, got {sigma}")));
    }
    if l_i != l_j {
        return Ok(0.0);
    }
    let r = (p_i - p_j) / sigma;
    Ok((-r * r).exp())
}

/// `[B, B]` weights with a zero diagonal.
pub fn progress_weights(instructions: &[usize], progress: &[f64], sigma: f64) -> Result<Tensor> {
    let b = instructions.len();
    let mut w = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            if i != j {
                w.data_mut()[i * b + j] =
                    progress_weight(instructions[i], instructions[j], progress[i], progress[j], sigma)?;
            }
        }
    }
    Ok(w)
}

/// Anchors with a positive weight sum over `j ≠ i`.
pub fn nce_anchors(w: &Tensor) -> Vec<usize> {
    let b = w.shape()[0];
    (0..b)
        .filter(|&i| (0..b).any(|j| j != i && w.data()[i * b + j] > 0.0))
        .collect()
}

/// Soft-weighted InfoNCE over unit rows `e` (`[B, d]`); 0 when no row has
/// a positive.
pub fn loss_nce(e: &Tensor, w: &Tensor, gamma: f64) -> Result<f64> {
    let b = e.shape()[0];
    if w.shape() != [b, b] {
        return Err(MotifError::Shape(format!(
            "weights {:?} for {b} embeddings",
            w.shape()
        )));
    }
    for (i, row) in e.data().chunks(e.last_dim()).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(MotifError::Domain(format!(
                "embedding row {i} has norm {n}, expected unit rows"
            )));
        }
    }
    let anchors = nce_anchors(w);
    if anchors.is_empty() {
        return Ok(0.0);
    }
    let sim = |i: usize, j: usize| -> f64 {
        e.row(i).iter().zip(e.row(j)).map(|(a, b)| a * b).sum::<f64>() / gamma
    };
    let mut total = 0.0;
    for &i in &anchors {
        let m = (0..b)
            .filter(|&j| j != i)
            .map(|j| sim(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        let num: f64 = (0..b)
            .filter(|&j| j != i)
            .map(|j| w.data()[i * b + j] * (sim(i, j) - m).exp())
            .sum();
        let den: f64 = (0..b).filter(|&j| j != i).map(|j| (sim(i, j) - m).exp()).sum();
        total -= (num / den).ln();
    }
    Ok(total / anchors.len() as f64)
}

/// `exp(H)` of the empirical code distribution.
pub fn codebook_perplexity(histogram: &[u64]) -> Result<f64> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(MotifError::Domain("empty code histogram".into()));
    }
    let n = total as f64;
    let h: f64 = histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pe_at_zero_and_lowest_frequency() {
        let pe = progress_pe(0.0, 256).unwrap();
        assert!(pe[..128].iter().all(|&v| v == 0.0));
        assert!(pe[128..].iter().all(|&v| v == 1.0));
        let one = progress_pe(1.0, 256).unwrap();
        assert!((one[0] - 1.0).abs() < 1e-12 && one[128].abs() < 1e-12);
        assert!(progress_pe(1.2, 8).is_err());
    }

    #[test]
    fn mask_counts() {
        let m = local_attention_mask(32, 8);
        assert_eq!((0..32).filter(|&c| m[c]).count(), 9);
        let id = local_attention_mask(5, 0);
        for i in 0..25 {
            assert_eq!(id[i], i / 5 == i % 5);
        }
    }

    #[test]
    fn quantize_examples() {
        let cb = Tensor::new(&[2, 1], vec![0.0, 10.0]);
        assert_eq!(quantize(&Tensor::new(&[1, 1], vec![3.0]), &cb).unwrap().indices, vec![0]);
        let cb = Tensor::new(&[6, 1], vec![9.0, 9.0, 1.0, 9.0, 9.0, 3.0]);
        let q = quantize(&Tensor::new(&[1, 1], vec![2.0]), &cb).unwrap();
        assert_eq!(q.indices, vec![2]);
        assert!(quantize(&cb, &Tensor::zeros(&[0, 1])).is_err());
    }

    #[test]
    fn vq_unit_offset() {
        let x = Tensor::ones(&[2, 3]);
        let z = Tensor::zeros(&[4, 2]);
        let zq = Tensor::ones(&[4, 2]);
        assert_eq!(loss_vq(&x, &x, &z, &z, 0.25).unwrap(), 0.0);
        assert!((loss_vq(&x, &x, &z, &zq, 0.25).unwrap() - 1.25).abs() < 1e-15);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(progress_weight(1, 1, 0.3, 0.3, 0.1).unwrap(), 1.0);
        assert_eq!(progress_weight(1, 2, 0.3, 0.3, 0.1).unwrap(), 0.0);
        let w = progress_weight(0, 0, 0.5, 0.6, 0.1).unwrap();
        assert!((w - (-1f64).exp()).abs() < 1e-12);
        assert!(progress_weight(0, 0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn nce_examples() {
        let e = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let w = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        assert!(loss_nce(&e, &w, 0.1).unwrap().abs() < 1e-15);
        assert_eq!(loss_nce(&e, &Tensor::zeros(&[2, 2]), 0.1).unwrap(), 0.0);
        let bad = Tensor::new(&[2, 2], vec![2.0, 0.0, 1.0, 0.0]);
        assert!(loss_nce(&bad, &w, 0.1).is_err());
    }

    #[test]
    fn perplexity_examples() {
        assert!((codebook_perplexity(&[3; 128]).unwrap() - 128.0).abs() < 1e-9);
        assert_eq!(codebook_perplexity(&[0, 7, 0]).unwrap(), 1.0);
        let mut h = vec![0; 128];
        h[0] = 5;
        h[1] = 5;
        assert!((codebook_perplexity(&h).unwrap() - 2.0).abs() < 1e-12);
        assert!(codebook_perplexity(&[0, 0]).is_err());
    }

    fn brute_nearest(z: &[f64], cb: &Tensor) -> usize {
        let k = cb.shape()[0];
        let mut best = (f64::INFINITY, 0);
        for j in 0..k {
            let d: f64 = z.iter().zip(cb.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        best.1
    }

    proptest! {
        #[test]
        fn quantize_matches_brute_force_and_is_idempotent(
            k in 1usize..12,
            d in 1usize..5,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cb = Tensor::from_fn(&[k, d], |_| rng.random_range(-1.0..1.0));
            let z = Tensor::from_fn(&[6, d], |_| rng.random_range(-1.5..1.5));
            let q = quantize(&z, &cb).unwrap();
            for i in 0..6 {
                prop_assert_eq!(q.indices[i], brute_nearest(z.row(i), &cb));
                prop_assert_eq!(q.values.row(i), cb.row(q.indices[i]));
            }
            let again = quantize(&q.values, &cb).unwrap();
            for (a, b) in again.indices.iter().zip(&q.indices) {
                prop_assert_eq!(cb.row(*a), cb.row(*b));
            }
        }

        #[test]
        fn weights_are_symmetric_bounded_and_monotone(
            l in 0usize..3,
            m in 0usize..3,
            p in 0.0f64..1.0,
            q in 0.0f64..1.0,
            sigma in 0.01f64..1.0,
        ) {
            let w = progress_weight(l, m, p, q, sigma).unwrap();
            prop_assert_eq!(w, progress_weight(m, l, q, p, sigma).unwrap());
            prop_assert!((0.0..=1.0).contains(&w));
            if l == m {
                let farther = progress_weight(l, m, p, q + 0.1 * (q - p).signum().max(0.0) + 0.05, sigma).unwrap();
                if p != q {
                    prop_assert!(w < 1.0);
                }
                if q >= p {
                    prop_assert!(farther < w || w == 0.0);
                }
            } else {
                prop_assert_eq!(w, 0.0);
            }
        }
    }

    #[test]
    fn configs_reach_m() {
        for c in [
            MotifEncoderConfig::default(),
            MotifEncoderConfig::desk(),
            MotifEncoderConfig::tiny(),
        ] {
            c.validate().unwrap();
        }
        assert_eq!(MotifEncoderConfig::default().conv_out_len(), 16);
    }
}
