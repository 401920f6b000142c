use motif_nn::layers::{sinusoid, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use motif_nn::{Bound, Graph, ParamBuilder, ParamId, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{euler_integrate, time_bucket, PolicyConfig};
use crate::error::{MotifError, Result};
use crate::motif_predictor::ContextEncoder;

/// Conditioning for a batch of velocity queries. States are normalized;
/// `motifs` must be present exactly when the policy uses them.
#[derive(Clone, Copy, Debug)]
pub struct PolicyInput<'a> {
    pub embodiment: &'a [usize],
    /// `[B, state_dim]`.
    pub state: &'a Tensor,
    /// `[B, obs_dim]`.
    pub obs: &'a Tensor,
    pub instruction: &'a [usize],
    /// `[B, M, d_e]` retrieved codebook entries.
    pub motifs: Option<&'a Tensor>,
}

impl PolicyInput<'_> {
    pub fn batch(&self) -> usize {
        self.embodiment.len()
    }
}

#[derive(Clone, Debug)]
struct DitBlock {
    modulation: Linear,
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ff: FeedForward,
}

/// Per-embodiment affine maps stored as stacked tables so that one batch
/// can mix embodiments.
#[derive(Clone, Copy, Debug)]
struct StackedLinear {
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl StackedLinear {
    fn new(pb: &mut ParamBuilder, n: usize, in_dim: usize, out_dim: usize, std: f64) -> Self {
        Self {
            weight: pb.normal("weight", &[n, in_dim * out_dim], std),
            bias: pb.zeros("bias", &[n, out_dim]),
            in_dim,
            out_dim,
        }
    }

    /// `x` `[B, T, in]` to `[B, T, out]`, row `b` using table `emb[b]`.
    fn forward(&self, g: &Graph, p: &Bound, x: Var, emb: &[usize]) -> Var {
        let (b, t) = (emb.len(), g.shape(x)[1]);
        let w = g.reshape(g.gather_rows(p.var(self.weight), emb), &[b, self.in_dim, self.out_dim]);
        let y = g.matmul(x, w);
        let bias = g.broadcast_axis(g.gather_rows(p.var(self.bias), emb), 1, t);
        g.add(y, bias)
    }
}

#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub params: ParamSet,
    context: ContextEncoder,
    context_norm: LayerNorm,
    time_table: ParamId,
    time_hidden: Linear,
    time_out: Linear,
    embodiment_table: ParamId,
    state_in: StackedLinear,
    motif_in: Linear,
    action_in: StackedLinear,
    state_pos: ParamId,
    motif_pos: ParamId,
    action_pos: ParamId,
    blocks: Vec<DitBlock>,
    final_modulation: Linear,
    head: StackedLinear,
}

fn modulate(g: &Graph, x: Var, shift: Var, scale: Var) -> Var {
    let t = g.shape(x)[1];
    let scale = g.broadcast_axis(g.add_scalar(scale, 1.0), 1, t);
    let shift = g.broadcast_axis(shift, 1, t);
    g.add(g.mul(g.layer_norm(x), scale), shift)
}

fn gated(g: &Graph, x: Var, gate: Var) -> Var {
    let t = g.shape(x)[1];
    g.mul(x, g.broadcast_axis(gate, 1, t))
}

impl PolicyModel {
    pub fn new(config: &PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let h = c.hidden;
        let n_emb = c.action_dims.len();
        let a_max = c.max_action_dim();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let context = ContextEncoder::new(&mut pb.sub("context"), c.obs_dim, c.obs_tokens, c.vocab, h);
        let context_norm = LayerNorm::new(&mut pb.sub("context_norm"), h);
        // Buckets start from fixed sinusoids of the bucket index so that
        // rarely drawn low-τ buckets still get distinct embeddings.
        let mut table = Vec::with_capacity(c.time_buckets * h);
        for k in 0..c.time_buckets {
            table.extend(sinusoid(k as f64, h, 1.0, 10_000.0));
        }
        let time_table = pb.add("time.table", Tensor::new(&[c.time_buckets, h], table));
        let time_hidden = Linear::new(&mut pb.sub("time.hidden"), h, h);
        let time_out = Linear::new(&mut pb.sub("time.out"), h, h);
        let embodiment_table = pb.normal("embodiment", &[n_emb, h], 0.1);
        let state_in = StackedLinear::new(
            &mut pb.sub("state_in"),
            n_emb,
            c.state_dim,
            h,
            1.0 / (c.state_dim as f64).sqrt(),
        );
        let motif_in = Linear::new(&mut pb.sub("motif_in"), c.d_e, h);
        let action_in = StackedLinear::new(&mut pb.sub("action_in"), n_emb, a_max, h, 1.0 / (a_max as f64).sqrt());
        let state_pos = pb.normal("pos.state", &[h], 0.1);
        let motif_pos = pb.normal("pos.motif", &[c.motif_tokens, h], 0.1);
        let action_pos = pb.normal("pos.action", &[c.h_a, h], 0.1);
        let head_dim = h / c.heads;
        let blocks = (0..c.layers)
            .map(|i| {
                let mut b = pb.sub(&format!("block{i}"));
                DitBlock {
                    modulation: Linear::with_std(&mut b.sub("modulation"), h, 9 * h, 0.0),
                    self_attn: MultiHeadAttention::new(&mut b.sub("self_attn"), h, h, c.heads, head_dim),
                    cross_attn: MultiHeadAttention::new(&mut b.sub("cross_attn"), h, h, c.heads, head_dim),
                    ff: FeedForward::new(&mut b.sub("ff"), h, h * c.ff_mult),
                }
            })
            .collect();
        let final_modulation = Linear::with_std(&mut pb.sub("final_modulation"), h, 2 * h, 0.0);
        let head = StackedLinear::new(&mut pb.sub("head"), n_emb, h, a_max, 1.0 / (h as f64).sqrt());
        Ok(Self {
            config: c.clone(),
            params,
            context,
            context_norm,
            time_table,
            time_hidden,
            time_out,
            embodiment_table,
            state_in,
            motif_in,
            action_in,
            state_pos,
            motif_pos,
            action_pos,
            blocks,
            final_modulation,
            head,
        })
    }

    fn check(&self, input: &PolicyInput, x_tau: &Tensor, buckets: &[usize]) -> Result<()> {
        let c = &self.config;
        let b = input.batch();
        if b == 0 {
            return Err(MotifError::Shape("empty policy batch".into()));
        }
        if input.state.shape() != [b, c.state_dim] {
            return Err(MotifError::Shape(format!(
                "expected [{b}, {}] states, got {:?}",
                c.state_dim,
                input.state.shape()
            )));
        }
        if x_tau.shape() != [b, c.h_a, c.max_action_dim()] {
            return Err(MotifError::Shape(format!(
                "expected [{b}, {}, {}] action chunks, got {:?}",
                c.h_a,
                c.max_action_dim(),
                x_tau.shape()
            )));
        }
        if buckets.len() != b || buckets.iter().any(|&k| k >= c.time_buckets) {
            return Err(MotifError::Domain("flow-time buckets do not match the batch".into()));
        }
        if let Some(&e) = input.embodiment.iter().find(|&&e| e >= c.action_dims.len()) {
            return Err(MotifError::Domain(format!("unknown embodiment {e}")));
        }
        match (c.use_motif, input.motifs) {
            (true, Some(m)) if m.shape() == [b, c.motif_tokens, c.d_e] => Ok(()),
            (true, Some(m)) => Err(MotifError::Shape(format!(
                "expected [{b}, {}, {}] motifs, got {:?}",
                c.motif_tokens,
                c.d_e,
                m.shape()
            ))),
            (true, None) => Err(MotifError::Config("policy expects motif tokens".into())),
            (false, Some(_)) => Err(MotifError::Config("policy was built without motif tokens".into())),
            (false, None) => Ok(()),
        }
    }

    /// Predicted velocity `[B, H_a, max_action_dim]` at the noisy chunk
    /// `x_tau`; padded action dims carry no meaning.
    pub fn velocity_graph(
        &self,
        g: &Graph,
        p: &Bound,
        input: &PolicyInput,
        x_tau: &Tensor,
        buckets: &[usize],
    ) -> Result<Var> {
        self.check(input, x_tau, buckets)?;
        let c = &self.config;
        let (b, h) = (input.batch(), c.hidden);
        let emb = input.embodiment;
        let drop = if g.is_training() { c.dropout } else { 0.0 };

        let ctx = self.context.forward(g, p, input.obs, input.instruction)?;
        let ctx = self.context_norm.forward(g, p, ctx);

        let t = g.gather_rows(p.var(self.time_table), buckets);
        let t = self.time_out.forward(g, p, g.silu(self.time_hidden.forward(g, p, t)));
        let cond = g.silu(g.add(t, g.gather_rows(p.var(self.embodiment_table), emb)));

        let state = g.constant(input.state.clone().reshape(&[b, 1, c.state_dim]));
        let mut parts = vec![g.add_trailing(self.state_in.forward(g, p, state, emb), p.var(self.state_pos))];
        if let Some(m) = input.motifs {
            let k = self.motif_in.forward(g, p, g.constant(m.clone()));
            parts.push(g.add_trailing(k, p.var(self.motif_pos)));
        }
        let a = self.action_in.forward(g, p, g.constant(x_tau.clone()), emb);
        parts.push(g.add_trailing(a, p.var(self.action_pos)));
        let mut x = g.concat(&parts, 1);

        for blk in &self.blocks {
            let m = blk.modulation.forward(g, p, cond);
            let chunk = |i: usize| g.narrow(m, 1, i * h, h);
            let y = modulate(g, x, chunk(0), chunk(1));
            let y = blk.self_attn.forward(g, p, y, y, None);
            x = g.add(x, gated(g, g.dropout(y, drop), chunk(2)));
            let y = modulate(g, x, chunk(3), chunk(4));
            let y = blk.cross_attn.forward(g, p, y, ctx, None);
            x = g.add(x, gated(g, g.dropout(y, drop), chunk(5)));
            let y = modulate(g, x, chunk(6), chunk(7));
            let y = blk.ff.forward(g, p, y, drop);
            x = g.add(x, gated(g, g.dropout(y, drop), chunk(8)));
        }
        let m = self.final_modulation.forward(g, p, cond);
        let x = modulate(g, x, g.narrow(m, 1, 0, h), g.narrow(m, 1, h, h));
        let tokens = g.shape(x)[1];
        let x = g.narrow(x, 1, tokens - c.h_a, c.h_a);
        Ok(self.head.forward(g, p, x, emb))
    }

    pub fn velocity(&self, input: &PolicyInput, x_tau: &Tensor, buckets: &[usize]) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let v = self.velocity_graph(&g, &p, input, x_tau, buckets)?;
        let out = g.value(v).clone();
        Ok(out)
    }

    /// Integrates the learned field from Gaussian noise with
    /// `inference_steps` Euler steps, giving normalized chunks
    /// `[B, H_a, max_action_dim]` with padded dims zeroed.
    pub fn generate(&self, input: &PolicyInput, seed: u64) -> Result<Tensor> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::from_fn(&[input.batch(), c.h_a, c.max_action_dim()], |_| {
            Distribution::<f64>::sample(&StandardNormal, &mut rng)
        });
        self.generate_from(input, &x0)
    }

    /// [`generate`](Self::generate) from a given starting noise.
    pub fn generate_from(&self, input: &PolicyInput, x0: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let b = input.batch();
        let mask = self.action_mask(input.embodiment)?;
        if x0.shape() != mask.shape() {
            return Err(MotifError::Shape(format!(
                "noise {:?} for chunks {:?}",
                x0.shape(),
                mask.shape()
            )));
        }
        let x0 = x0.zip_map(&mask, |a, m| a * m);
        euler_integrate(&x0, c.inference_steps, |x, tau| {
            let k = time_bucket(tau, c.time_buckets);
            let v = self.velocity(input, x, &vec![k; b])?;
            Ok(v.zip_map(&mask, |a, m| a * m))
        })
    }

    /// 1 on the action dims each embodiment actually has.
    pub fn action_mask(&self, embodiment: &[usize]) -> Result<Tensor> {
        let c = &self.config;
        let a_max = c.max_action_dim();
        let mut data = Vec::with_capacity(embodiment.len() * c.h_a * a_max);
        for &e in embodiment {
            let d = *c
                .action_dims
                .get(e)
                .ok_or_else(|| MotifError::Domain(format!("unknown embodiment {e}")))?;
            for _ in 0..c.h_a {
                data.extend((0..a_max).map(|j| if j < d { 1.0 } else { 0.0 }));
            }
        }
        Ok(Tensor::new(&[embodiment.len(), c.h_a, a_max], data))
    }
}
