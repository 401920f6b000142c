//! Building blocks shared by the motif models.
//!
//! Every layer stores only [`ParamId`]s; the values live in a [`ParamSet`]
//! and are bound onto a [`Graph`] per step.

use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::Tensor;

/// Large negative logit used for masked attention entries.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = pb.normal("weight", &[in_dim, out_dim], std);
        let bias = Some(pb.zeros("bias", &[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Linear map with a custom init scale, used where a near-zero start
    /// keeps residual branches quiet.
    pub fn with_std(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize, std: f64) -> Self {
        let weight = pb.normal("weight", &[in_dim, out_dim], std);
        let bias = Some(pb.zeros("bias", &[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.weight));
        match self.bias {
            Some(b) => g.add_trailing(y, p.var(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Self {
        Self {
            gain: pb.ones("gain", &[dim]),
            bias: pb.zeros("bias", &[dim]),
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Var {
        let y = g.layer_norm(x);
        let y = g.mul_trailing(y, p.var(self.gain));
        g.add_trailing(y, p.var(self.bias))
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(&mut pb.sub("up"), dim, hidden),
            down: Linear::new(&mut pb.sub("down"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var, dropout: f64) -> Var {
        let h = g.gelu(self.up.forward(g, p, x));
        let h = g.dropout(h, dropout);
        self.down.forward(g, p, h)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        pb: &mut ParamBuilder,
        q_dim: usize,
        kv_dim: usize,
        heads: usize,
        head_dim: usize,
    ) -> Self {
        let inner = heads * head_dim;
        Self {
            q: Linear::new(&mut pb.sub("q"), q_dim, inner),
            k: Linear::new(&mut pb.sub("k"), kv_dim, inner),
            v: Linear::new(&mut pb.sub("v"), kv_dim, inner),
            out: Linear::new(&mut pb.sub("out"), inner, q_dim),
            heads,
            head_dim,
        }
    }

    fn split_heads(&self, g: &Graph, x: Var) -> Var {
        let s = g.shape(x);
        let (b, t) = (s[0], s[1]);
        let x = g.reshape(x, &[b, t, self.heads, self.head_dim]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b * self.heads, t, self.head_dim])
    }

    /// `query` is `[B, Tq, q_dim]`, `context` is `[B, Tk, kv_dim]`; `mask`
    /// (if any) is an additive `[Tq, Tk]` constant.
    pub fn forward(&self, g: &Graph, p: &Bound, query: Var, context: Var, mask: Option<Var>) -> Var {
        let qs = g.shape(query);
        let (b, tq) = (qs[0], qs[1]);
        let q = self.split_heads(g, self.q.forward(g, p, query));
        let k = self.split_heads(g, self.k.forward(g, p, context));
        let v = self.split_heads(g, self.v.forward(g, p, context));
        let scores = g.matmul_t(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (self.head_dim as f64).sqrt());
        let scores = match mask {
            Some(m) => g.add_trailing(scores, m),
            None => scores,
        };
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, v);
        let ctx = g.reshape(ctx, &[b, self.heads, tq, self.head_dim]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, tq, self.heads * self.head_dim]);
        self.out.forward(g, p, ctx)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize, ff_mult: usize) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            norm1: LayerNorm::new(&mut pb.sub("norm1"), dim),
            attn: MultiHeadAttention::new(&mut pb.sub("attn"), dim, dim, heads, dim / heads),
            norm2: LayerNorm::new(&mut pb.sub("norm2"), dim),
            ff: FeedForward::new(&mut pb.sub("ff"), dim, dim * ff_mult),
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var, mask: Option<Var>, dropout: f64) -> Var {
        let h = self.norm1.forward(g, p, x);
        let h = self.attn.forward(g, p, h, h, mask);
        let x = g.add(x, g.dropout(h, dropout));
        let h = self.norm2.forward(g, p, x);
        let h = self.ff.forward(g, p, h, dropout);
        g.add(x, g.dropout(h, dropout))
    }
}

/// Channel-last 1-D convolution `[B, T, C_in] -> [B, T_out, C_out]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub proj: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    /// "Same"-style padding of `kernel / 2`.
    pub fn new(pb: &mut ParamBuilder, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        Self {
            proj: Linear::new(pb, kernel * c_in, c_out),
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn out_len(&self, t: usize) -> usize {
        (t + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Var {
        let cols = g.unfold1d(x, self.kernel, self.stride, self.pad);
        self.proj.forward(g, p, cols)
    }
}

/// Lookup table `[vocab, dim]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(pb: &mut ParamBuilder, vocab: usize, dim: usize, std: f64) -> Self {
        Self {
            table: pb.normal("table", &[vocab, dim], std),
            vocab,
            dim,
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, ids: &[usize]) -> Var {
        g.gather_rows(p.var(self.table), ids)
    }
}

/// Additive mask allowing `|t - u| <= k`.
pub fn band_mask(t: usize, k: usize) -> Tensor {
    Tensor::from_fn(&[t, t], |i| {
        let (r, c) = (i / t, i % t);
        if r.abs_diff(c) <= k {
            0.0
        } else {
            MASKED
        }
    })
}

/// Row-stochastic `[out_len, in_len]` matrix averaging equal-width bins
/// (adaptive average pooling along time).
pub fn adaptive_pool_matrix(in_len: usize, out_len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[out_len, in_len]);
    for o in 0..out_len {
        let start = o * in_len / out_len;
        let end = ((o + 1) * in_len).div_ceil(out_len);
        let w = 1.0 / (end - start) as f64;
        for i in start..end {
            m.data_mut()[o * in_len + i] = w;
        }
    }
    m
}

/// `[out_len, in_len]` linear-interpolation resampling matrix (align-corners).
pub fn interpolation_matrix(in_len: usize, out_len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[out_len, in_len]);
    for o in 0..out_len {
        if in_len == 1 {
            m.data_mut()[o] = 1.0;
            continue;
        }
        let pos = if out_len == 1 {
            0.0
        } else {
            o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let frac = pos - lo as f64;
        m.data_mut()[o * in_len + lo] += 1.0 - frac;
        m.data_mut()[o * in_len + hi] += frac;
    }
    m
}

/// Fixed sinusoidal features of a scalar position: `[sin(x·f_i)..., cos(x·f_i)...]`
/// with frequencies `f_i = base^{-i/half}` scaled by `x_scale`.
pub fn sinusoid(x: f64, dim: usize, x_scale: f64, base: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = x_scale * base.powf(-(i as f64) / half.max(1) as f64);
        out[i] = (x * freq).sin();
        out[half + i] = (x * freq).cos();
    }
    out
}
