use motif_nn::layers::{
    adaptive_pool_matrix, band_mask, interpolation_matrix, sinusoid, Conv1d, LayerNorm, Linear,
    TransformerBlock,
};
use motif_nn::{Bound, Graph, ParamBuilder, ParamId, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{nce_anchors, progress_pe, progress_weights, quantize, MotifEncoderConfig, Quantized};
use crate::error::{MotifError, Result};

/// A minibatch of Stage I windows.
#[derive(Clone, Debug)]
pub struct Stage1Batch {
    /// `[B, H_s, d_s]`.
    pub x: Tensor,
    pub progress: Vec<f64>,
    pub instruction: Vec<usize>,
    pub embodiment: Vec<usize>,
}

/// Quantizer state held fixed across repeated evaluations, so that finite
/// differences see a smooth function.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub indices: Vec<usize>,
    /// `[B·M, d_e]` encoder output at the snapshot point.
    pub z_e: Tensor,
    /// `[B·M, d_e]` selected codes at the snapshot point.
    pub z_q: Tensor,
}

#[derive(Clone, Debug)]
pub struct LossOptions {
    pub quantize: bool,
    pub reverse_adv: bool,
    pub snapshot: Option<Snapshot>,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            quantize: true,
            reverse_adv: true,
            snapshot: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stage1Terms {
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub vq: f64,
    pub nce: f64,
    pub adv: f64,
    /// `vq + λ_nce·nce + λ_adv·adv`.
    pub total: f64,
}

/// Graph nodes of one Stage I loss evaluation.
pub struct Stage1Graph {
    /// Backward root: `vq + λ_nce·nce + adv` with `adv` behind gradient
    /// reversal (or `+ λ_adv·adv` when reversal is off).
    pub root: Var,
    pub vq: Var,
    pub nce: Option<Var>,
    pub adv: Option<Var>,
    pub z_e: Var,
    pub terms: Stage1Terms,
    pub snapshot: Option<Snapshot>,
}

#[derive(Clone, Debug)]
pub struct VqModel {
    pub config: MotifEncoderConfig,
    pub params: ParamSet,
    input: Linear,
    enc_blocks: Vec<TransformerBlock>,
    enc_norm: LayerNorm,
    down: Vec<Conv1d>,
    pool: Option<Tensor>,
    codebook: ParamId,
    up_in: Conv1d,
    upsample: Tensor,
    up_out: Conv1d,
    dec_blocks: Vec<TransformerBlock>,
    dec_norm: LayerNorm,
    output: Linear,
    disc_hidden: Linear,
    disc_out: Linear,
    mask: Tensor,
    time_pe: Tensor,
}

impl VqModel {
    pub fn new(config: &MotifEncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let input = Linear::new(&mut pb.sub("enc.input"), c.state_dim, c.d_model);
        let enc_blocks = (0..c.enc_layers)
            .map(|i| TransformerBlock::new(&mut pb.sub(&format!("enc.block{i}")), c.d_model, c.heads, c.ff_mult))
            .collect();
        let enc_norm = LayerNorm::new(&mut pb.sub("enc.norm"), c.d_model);
        let n_conv = c.conv_kernels.len();
        let mut down = Vec::with_capacity(n_conv);
        for i in 0..n_conv {
            let cout = if i + 1 == n_conv { c.d_e } else { c.d_model };
            down.push(Conv1d::new(
                &mut pb.sub(&format!("enc.conv{i}")),
                c.d_model,
                cout,
                c.conv_kernels[i],
                c.conv_strides[i],
            ));
        }
        let t_conv = c.conv_out_len();
        let pool = (t_conv != c.m).then(|| adaptive_pool_matrix(t_conv, c.m));
        let codebook = pb.normal("codebook", &[c.codebook_size, c.d_e], 1.0 / (c.d_e as f64).sqrt());
        let up_in = Conv1d::new(&mut pb.sub("dec.conv_in"), c.d_e, c.d_model, 3, 1);
        let up_out = Conv1d::new(&mut pb.sub("dec.conv_out"), c.d_model, c.d_model, 5, 1);
        let dec_blocks = (0..c.dec_layers)
            .map(|i| TransformerBlock::new(&mut pb.sub(&format!("dec.block{i}")), c.d_model, c.heads, c.ff_mult))
            .collect();
        let dec_norm = LayerNorm::new(&mut pb.sub("dec.norm"), c.d_model);
        let output = Linear::new(&mut pb.sub("dec.output"), c.d_model, c.state_dim);
        let disc_hidden = Linear::new(&mut pb.sub("disc.hidden"), c.d_e, c.d_e);
        let disc_out = Linear::new(&mut pb.sub("disc.out"), c.d_e, c.num_embodiments);
        let mut time_pe = Vec::with_capacity(c.h_s * c.d_model);
        for t in 0..c.h_s {
            time_pe.extend(sinusoid(t as f64, c.d_model, 1.0, 10_000.0));
        }
        Ok(Self {
            config: c.clone(),
            params,
            input,
            enc_blocks,
            enc_norm,
            down,
            pool,
            codebook,
            up_in,
            upsample: interpolation_matrix(c.m, c.h_s),
            up_out,
            dec_blocks,
            dec_norm,
            output,
            disc_hidden,
            disc_out,
            mask: band_mask(c.h_s, c.local_k),
            time_pe: Tensor::new(&[c.h_s, c.d_model], time_pe),
        })
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get(self.codebook)
    }

    /// Parameter ids of the encoder (input projection through the last
    /// convolution).
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params.name(i).starts_with("enc."))
            .collect()
    }

    fn check_batch(&self, x: &Tensor, progress: &[f64]) -> Result<()> {
        let c = &self.config;
        let s = x.shape();
        if s.len() != 3 || s[1] != c.h_s || s[2] != c.state_dim {
            return Err(MotifError::Shape(format!(
                "expected [B, {}, {}] windows, got {s:?}",
                c.h_s, c.state_dim
            )));
        }
        if progress.len() != s[0] {
            return Err(MotifError::Shape(format!(
                "{} progress values for {} windows",
                progress.len(),
                s[0]
            )));
        }
        Ok(())
    }

    fn positional(&self, progress: &[f64]) -> Result<Tensor> {
        let (h, d) = (self.config.h_s, self.config.d_model);
        let mut out = Vec::with_capacity(progress.len() * h * d);
        for &p in progress {
            let pe = progress_pe(p, d)?;
            for t in 0..h {
                out.extend(self.time_pe.row(t).iter().zip(&pe).map(|(a, b)| a + b));
            }
        }
        Ok(Tensor::new(&[progress.len(), h, d], out))
    }

    fn dropout(&self, g: &Graph) -> f64 {
        if g.is_training() {
            self.config.dropout
        } else {
            0.0
        }
    }

    /// `[B, H_s, d_s]` windows to continuous tokens `[B, M, d_e]`.
    pub fn encode_graph(&self, g: &Graph, p: &Bound, x: Var, progress: &[f64]) -> Result<Var> {
        let pe = self.positional(progress)?;
        let h = self.input.forward(g, p, x);
        let mut h = g.add(h, g.constant(pe));
        let mask = g.constant(self.mask.clone());
        let drop = self.dropout(g);
        for block in &self.enc_blocks {
            h = block.forward(g, p, h, Some(mask), drop);
        }
        h = self.enc_norm.forward(g, p, h);
        for (i, conv) in self.down.iter().enumerate() {
            h = conv.forward(g, p, h);
            if i + 1 < self.down.len() {
                h = g.gelu(h);
            }
        }
        if let Some(pool) = &self.pool {
            h = g.time_mix(h, pool);
        }
        Ok(h)
    }

    /// Tokens `[B, M, d_e]` to windows `[B, H_s, d_s]`.
    pub fn decode_graph(&self, g: &Graph, p: &Bound, z: Var) -> Var {
        let b = g.shape(z)[0];
        let h = g.gelu(self.up_in.forward(g, p, z));
        let h = g.time_mix(h, &self.upsample);
        let h = self.up_out.forward(g, p, h);
        let pe = Tensor::from_fn(&[b, self.config.h_s, self.config.d_model], |i| {
            self.time_pe.data()[i % self.time_pe.len()]
        });
        let mut h = g.add(h, g.constant(pe));
        let mask = g.constant(self.mask.clone());
        let drop = self.dropout(g);
        for block in &self.dec_blocks {
            h = block.forward(g, p, h, Some(mask), drop);
        }
        let h = self.dec_norm.forward(g, p, h);
        self.output.forward(g, p, h)
    }

    /// Per-token embodiment logits `[N_tokens, N]` for tokens `[N_tokens, d_e]`.
    pub fn discriminate_graph(&self, g: &Graph, p: &Bound, z: Var) -> Var {
        let h = g.gelu(self.disc_hidden.forward(g, p, z));
        self.disc_out.forward(g, p, h)
    }

    /// Full Stage I objective for one batch.
    pub fn loss_graph(
        &self,
        g: &Graph,
        p: &Bound,
        batch: &Stage1Batch,
        opts: &LossOptions,
    ) -> Result<Stage1Graph> {
        let c = &self.config;
        self.check_batch(&batch.x, &batch.progress)?;
        let b = batch.x.shape()[0];
        if batch.instruction.len() != b || batch.embodiment.len() != b {
            return Err(MotifError::Shape("batch metadata length mismatch".into()));
        }
        if let Some(&bad) = batch.embodiment.iter().find(|&&y| y >= c.num_embodiments) {
            return Err(MotifError::Domain(format!(
                "embodiment label {bad} outside 0..{}",
                c.num_embodiments
            )));
        }
        let x = g.constant(batch.x.clone());
        let z_e = self.encode_graph(g, p, x, &batch.progress)?;
        let flat = g.reshape(z_e, &[b * c.m, c.d_e]);

        let mut terms = Stage1Terms::default();
        let (dec_in, latent, snapshot) = if opts.quantize {
            let snap = match &opts.snapshot {
                Some(s) => s.clone(),
                None => {
                    let ze = g.value(flat).clone();
                    let cb = g.value(p.var(self.codebook)).clone();
                    let Quantized { indices, values } = quantize(&ze, &cb)?;
                    Snapshot {
                        indices,
                        z_e: ze,
                        z_q: values,
                    }
                }
            };
            let cb = p.var(self.codebook);
            let zq = g.gather_rows(cb, &snap.indices);
            let codebook_term = g.mean(g.sqr(g.sub(g.constant(snap.z_e.clone()), zq)));
            let commit = g.mean(g.sqr(g.sub(flat, g.constant(snap.z_q.clone()))));
            let dec_in = if opts.snapshot.is_some() {
                let offset = snap.z_q.zip_map(&snap.z_e, |q, e| q - e);
                g.add(flat, g.constant(offset))
            } else {
                g.straight_through(flat, snap.z_q.clone())
            };
            terms.codebook = g.value(codebook_term).item();
            terms.commit = g.value(commit).item();
            let latent = g.add(codebook_term, g.scale(commit, c.beta));
            (dec_in, Some(latent), Some(snap))
        } else {
            (flat, None, None)
        };

        let x_hat = self.decode_graph(g, p, g.reshape(dec_in, &[b, c.m, c.d_e]));
        let recon = g.mean(g.sqr(g.sub(x_hat, x)));
        terms.recon = g.value(recon).item();
        let vq = match latent {
            Some(l) => g.add(recon, l),
            None => recon,
        };
        terms.vq = g.value(vq).item();
        let mut root = vq;

        let mut nce = None;
        if c.lambda_nce > 0.0 {
            let w = progress_weights(&batch.instruction, &batch.progress, c.sigma)?;
            let anchors = nce_anchors(&w);
            if !anchors.is_empty() {
                let e = g.normalize_rows(g.mean_axis(z_e, 1));
                let sim = g.scale(g.matmul_t(e, e, false, true), 1.0 / c.gamma);
                let rows = g.gather_rows(sim, &anchors);
                let w_pos = Tensor::from_fn(&[anchors.len(), b], |i| {
                    w.data()[anchors[i / b] * b + i % b]
                });
                let w_all = Tensor::from_fn(&[anchors.len(), b], |i| {
                    if anchors[i / b] == i % b {
                        0.0
                    } else {
                        1.0
                    }
                });
                let l = g.mean(g.sub(
                    g.weighted_logsumexp(rows, &w_all),
                    g.weighted_logsumexp(rows, &w_pos),
                ));
                terms.nce = g.value(l).item();
                root = g.add(root, g.scale(l, c.lambda_nce));
                nce = Some(l);
            }
        }

        let mut adv = None;
        if c.lambda_adv > 0.0 {
            let labels: Vec<usize> = batch
                .embodiment
                .iter()
                .flat_map(|&y| std::iter::repeat_n(y, c.m))
                .collect();
            let tokens = if opts.reverse_adv {
                g.grad_reverse(flat, c.lambda_adv)
            } else {
                flat
            };
            let l = g.cross_entropy(self.discriminate_graph(g, p, tokens), &labels);
            terms.adv = g.value(l).item();
            root = if opts.reverse_adv {
                g.add(root, l)
            } else {
                g.add(root, g.scale(l, c.lambda_adv))
            };
            adv = Some(l);
        }
        terms.total = terms.vq + c.lambda_nce * terms.nce + c.lambda_adv * terms.adv;
        Ok(Stage1Graph {
            root,
            vq,
            nce,
            adv,
            z_e,
            terms,
            snapshot,
        })
    }

    /// Continuous tokens `[B, M, d_e]` in eval mode.
    pub fn encode(&self, x: &Tensor, progress: &[f64]) -> Result<Tensor> {
        self.check_batch(x, progress)?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let z = self.encode_graph(&g, &p, g.constant(x.clone()), progress)?;
        let out = g.value(z).clone();
        Ok(out)
    }

    /// Reconstruction `[B, H_s, d_s]` from tokens `[B, M, d_e]` in eval mode.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let s = z.shape();
        if s.len() != 3 || s[1] != c.m || s[2] != c.d_e {
            return Err(MotifError::Shape(format!(
                "expected [B, {}, {}] tokens, got {s:?}",
                c.m, c.d_e
            )));
        }
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = self.decode_graph(&g, &p, g.constant(z.clone()));
        let out = g.value(x).clone();
        Ok(out)
    }

    /// Encode, quantize and decode; returns the reconstruction and code ids.
    pub fn reconstruct(&self, x: &Tensor, progress: &[f64]) -> Result<(Tensor, Vec<usize>)> {
        let z = self.encode(x, progress)?;
        let q = quantize(&z, self.codebook())?;
        Ok((self.decode(&q.values)?, q.indices))
    }

    /// Per-token embodiment probabilities for tokens `[M, d_e]`.
    pub fn discriminator_probs(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 2 || z.shape()[1] != self.config.d_e {
            return Err(MotifError::Shape(format!(
                "expected [M, {}] tokens, got {:?}",
                self.config.d_e,
                z.shape()
            )));
        }
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let logits = self.discriminate_graph(&g, &p, g.constant(z.clone()));
        let probs = g.softmax(logits);
        let out = g.value(probs).clone();
        Ok(out)
    }

    /// Mean per-token negative log-likelihood of embodiment `y`.
    pub fn loss_adv(&self, z: &Tensor, y: usize) -> Result<f64> {
        if y >= self.config.num_embodiments {
            return Err(MotifError::Domain(format!(
                "embodiment label {y} outside 0..{}",
                self.config.num_embodiments
            )));
        }
        let probs = self.discriminator_probs(z)?;
        let n = probs.shape()[0];
        Ok(-(0..n).map(|i| probs.row(i)[y].ln()).sum::<f64>() / n as f64)
    }
}
