//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Graph::backward`] then walks the tape in reverse and
//! returns the gradient of a scalar root with respect to every node that
//! requires one. Graphs are cheap and meant to be rebuilt for every step.

use std::cell::{Ref, RefCell};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::bmm;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Sqr,
    Sqrt,
    Tanh,
    Relu,
    Silu,
    /// tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        // (ar, ac, br, bc, batch) of the stored operands
        dims: [usize; 5],
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    MeanAxis(Var, usize),
    BroadcastAxis(Var, usize),
    GatherRows(Var, Vec<usize>),
    Unfold1d {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    TimeMix(Var, Tensor),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    WeightedLse {
        x: Var,
        weights: Tensor,
    },
    GradReverse(Var, f64),
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// The recording tape.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    /// A graph in evaluation mode (dropout disabled).
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// A graph in training mode whose dropout masks derive from `seed`.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(training: bool, seed: u64) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            training,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// New constant holding the current value of `v`; blocks gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_trailing(&self, a: Var, b: Var) -> Var {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            check_trailing(av.shape(), bv.shape());
            let n = bv.len();
            let mut out = av.clone();
            for chunk in out.data_mut().chunks_mut(n) {
                for (o, y) in chunk.iter_mut().zip(bv.data()) {
                    *o += y;
                }
            }
            out
        };
        let rg = self.rg(&[a, b]);
        self.push(out, Op::AddTrailing(a, b), rg)
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn mul_trailing(&self, a: Var, b: Var) -> Var {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            check_trailing(av.shape(), bv.shape());
            let n = bv.len();
            let mut out = av.clone();
            for chunk in out.data_mut().chunks_mut(n) {
                for (o, y) in chunk.iter_mut().zip(bv.data()) {
                    *o *= y;
                }
            }
            out
        };
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MulTrailing(a, b), rg)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn unary(&self, a: Var, kind: Unary) -> Var {
        let out = self.value(a).map(|x| match kind {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqr => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Silu => x / (1.0 + (-x).exp()),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        });
        let rg = self.rg(&[a]);
        self.push(out, Op::Unary(a, kind), rg)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sqr(&self, a: Var) -> Var {
        self.unary(a, Unary::Sqr)
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let shape = self.shape(a);
        let keep = 1.0 - p;
        let mask = {
            let mut rng = self.rng.borrow_mut();
            Tensor::from_fn(&shape, |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        };
        let m = self.constant(mask);
        self.mul(a, m)
    }

    // ----- linear algebra ---------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// If `b` has rank 2 it is shared by every leading index of `a` (and
    /// `ta` must be false). Otherwise the leading axes of `a` and `b` must
    /// hold the same number of matrices.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (out, dims) = {
            let (av, bv) = (self.value(a), self.value(b));
            let (ash, bsh) = (av.shape(), bv.shape());
            assert!(ash.len() >= 2 && bsh.len() >= 2, "matmul needs rank >= 2");
            let (br, bc) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
            let n = if tb { br } else { bc };
            if bsh.len() == 2 {
                assert!(!ta, "shared right operand requires untransposed left operand");
                let ac = *ash.last().unwrap();
                let ar = av.len() / ac.max(1);
                let data = bmm(av.data(), ar, ac, false, bv.data(), br, bc, tb, 1);
                let mut shape = ash[..ash.len() - 1].to_vec();
                shape.push(n);
                (Tensor::new(&shape, data), [ar, ac, br, bc, 1])
            } else {
                let (ar, ac) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let batch: usize = ash[..ash.len() - 2].iter().product();
                let bbatch: usize = bsh[..bsh.len() - 2].iter().product();
                assert_eq!(batch, bbatch, "matmul batch mismatch {ash:?} x {bsh:?}");
                let m = if ta { ac } else { ar };
                let data = bmm(av.data(), ar, ac, ta, bv.data(), br, bc, tb, batch);
                let mut shape = ash[..ash.len() - 2].to_vec();
                shape.push(m);
                shape.push(n);
                (Tensor::new(&shape, data), [ar, ac, br, bc, batch])
            }
        };
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul { a, b, ta, tb, dims }, rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    // ----- normalisation / softmax -----------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let out = {
            let av = self.value(a);
            let c = av.last_dim();
            let mut out = av.clone();
            for row in out.data_mut().chunks_mut(c) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
            out
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Layer normalisation over the last axis without affine parameters.
    pub fn layer_norm(&self, a: Var) -> Var {
        let (out, inv_std) = {
            let av = self.value(a);
            let c = av.last_dim();
            let mut out = av.clone();
            let mut inv_std = Vec::with_capacity(av.len() / c.max(1));
            for row in out.data_mut().chunks_mut(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * is;
                }
                inv_std.push(is);
            }
            (out, inv_std)
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn normalize_rows(&self, a: Var) -> Var {
        let (out, norms) = {
            let av = self.value(a);
            let c = av.last_dim();
            let mut out = av.clone();
            let mut norms = Vec::new();
            for row in out.data_mut().chunks_mut(c) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
                for x in row.iter_mut() {
                    *x /= n;
                }
                norms.push(n);
            }
            (out, norms)
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::NormalizeRows { x: a, norms }, rg)
    }

    // ----- shape ------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let out = self.value(a).permute(axes);
        let rg = self.rg(&[a]);
        self.push(out, Op::Permute(a, axes.to_vec()), rg)
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            let mut shape = first.clone();
            shape[axis] = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for (i, (&x, &y)) in s.iter().zip(&first).enumerate() {
                    assert!(i == axis || x == y, "concat shape mismatch {s:?} vs {first:?}");
                }
                shape[axis] += s[axis];
            }
            let (outer, _, inner) = outer_inner(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.0].value;
                    let len = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
            Tensor::new(&shape, data)
        };
        let rg = self.rg(parts);
        self.push(out, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let out = {
            let av = self.value(a);
            let sh = av.shape();
            assert!(start + len <= sh[axis], "narrow out of range");
            let (outer, n, inner) = outer_inner(sh, axis);
            let mut shape = sh.to_vec();
            shape[axis] = len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                data.extend_from_slice(&av.data()[base..base + len * inner]);
            }
            Tensor::new(&shape, data)
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::Narrow { x: a, axis, start }, rg)
    }

    /// Inserts a new axis of size `n` at `axis`, repeating the input.
    pub fn broadcast_axis(&self, a: Var, axis: usize, n: usize) -> Var {
        let out = {
            let av = self.value(a);
            let sh = av.shape();
            let outer: usize = sh[..axis].iter().product();
            let inner: usize = sh[axis..].iter().product();
            let mut shape = sh.to_vec();
            shape.insert(axis, n);
            let mut data = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                let chunk = &av.data()[o * inner..(o + 1) * inner];
                for _ in 0..n {
                    data.extend_from_slice(chunk);
                }
            }
            Tensor::new(&shape, data)
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::BroadcastAxis(a, axis), rg)
    }

    // ----- reductions -------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanAll(a), rg)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, a: Var, axis: usize) -> Var {
        let out = {
            let av = self.value(a);
            let (outer, n, inner) = outer_inner(av.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    let src = &av.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                    for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let inv = 1.0 / n as f64;
            data.iter_mut().for_each(|x| *x *= inv);
            let mut shape = av.shape().to_vec();
            shape.remove(axis);
            Tensor::new(&shape, data)
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanAxis(a, axis), rg)
    }

    // ----- indexing ---------------------------------------------------

    /// Rows of a `[V, C]` table selected by `idx`, giving `[idx.len(), C]`.
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Var {
        let out = {
            let tv = self.value(table);
            assert_eq!(tv.rank(), 2, "gather_rows expects a matrix");
            let c = tv.shape()[1];
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                assert!(i < tv.shape()[0], "row index {i} out of range");
                data.extend_from_slice(tv.row(i));
            }
            Tensor::new(&[idx.len(), c], data)
        };
        let rg = self.rg(&[table]);
        self.push(out, Op::GatherRows(table, idx.to_vec()), rg)
    }

    /// Sliding windows of a channel-last sequence `[B, T, C]`, giving
    /// `[B, T_out, kernel * C]` with zero padding `pad` on both ends.
    pub fn unfold1d(&self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let out = {
            let xv = self.value(x);
            let sh = xv.shape();
            assert_eq!(sh.len(), 3, "unfold1d expects [B, T, C]");
            let (b, t, c) = (sh[0], sh[1], sh[2]);
            assert!(t + 2 * pad >= kernel, "kernel longer than padded input");
            let t_out = (t + 2 * pad - kernel) / stride + 1;
            let mut data = vec![0.0; b * t_out * kernel * c];
            for bi in 0..b {
                for to in 0..t_out {
                    for j in 0..kernel {
                        let ti = (to * stride + j) as isize - pad as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let src = (bi * t + ti as usize) * c;
                        let dst = ((bi * t_out + to) * kernel + j) * c;
                        data[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]);
                    }
                }
            }
            Tensor::new(&[b, t_out, kernel * c], data)
        };
        let rg = self.rg(&[x]);
        self.push(
            out,
            Op::Unfold1d {
                x,
                kernel,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Applies a fixed `[T_out, T]` matrix along the time axis of `[B, T, C]`.
    pub fn time_mix(&self, x: Var, mix: &Tensor) -> Var {
        let out = {
            let xv = self.value(x);
            let sh = xv.shape();
            assert_eq!(sh.len(), 3, "time_mix expects [B, T, C]");
            let (b, t, c) = (sh[0], sh[1], sh[2]);
            assert_eq!(mix.shape()[1], t, "time_mix length mismatch");
            let to = mix.shape()[0];
            let mut data = Vec::with_capacity(b * to * c);
            for bi in 0..b {
                let blk = &xv.data()[bi * t * c..(bi + 1) * t * c];
                data.extend(bmm(mix.data(), to, t, false, blk, t, c, false, 1));
            }
            Tensor::new(&[b, to, c], data)
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::TimeMix(x, mix.clone()), rg)
    }

    // ----- losses -----------------------------------------------------

    /// Mean cross-entropy of `[N, C]` logits against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let (loss, probs) = {
            let lv = self.value(logits);
            assert_eq!(lv.rank(), 2, "cross_entropy expects [N, C]");
            let (n, c) = (lv.shape()[0], lv.shape()[1]);
            assert_eq!(labels.len(), n, "label count mismatch");
            let mut probs = lv.clone();
            let mut loss = 0.0;
            for (i, row) in probs.data_mut().chunks_mut(c).enumerate() {
                assert!(labels[i] < c, "label {} out of range", labels[i]);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                loss += lse - row[labels[i]];
                for x in row.iter_mut() {
                    *x = (*x - lse).exp();
                }
            }
            (loss / n as f64, probs)
        };
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Row-wise `log Σ_j w_ij exp(x_ij)` for `[N, C]` inputs and fixed
    /// non-negative weights. Every row needs at least one positive weight.
    pub fn weighted_logsumexp(&self, x: Var, weights: &Tensor) -> Var {
        let out = {
            let xv = self.value(x);
            assert_eq!(xv.shape(), weights.shape(), "weight shape mismatch");
            let c = xv.last_dim();
            let mut out = Vec::with_capacity(xv.len() / c);
            for (row, w) in xv.data().chunks(c).zip(weights.data().chunks(c)) {
                let m = row
                    .iter()
                    .zip(w)
                    .filter(|(_, &w)| w > 0.0)
                    .map(|(&x, _)| x)
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(m.is_finite(), "row without positive weight");
                let s: f64 = row
                    .iter()
                    .zip(w)
                    .map(|(&x, &w)| if w > 0.0 { w * (x - m).exp() } else { 0.0 })
                    .sum();
                out.push(m + s.ln());
            }
            let n = out.len();
            Tensor::new(&[n], out)
        };
        let rg = self.rg(&[x]);
        self.push(
            out,
            Op::WeightedLse {
                x,
                weights: weights.clone(),
            },
            rg,
        )
    }

    // ----- gradient routing ------------------------------------------

    /// Identity forward; multiplies the incoming gradient by `-scale`.
    pub fn grad_reverse(&self, a: Var, scale: f64) -> Var {
        let out = self.value(a).clone();
        let rg = self.rg(&[a]);
        self.push(out, Op::GradReverse(a, scale), rg)
    }

    /// Emits `value` exactly while passing gradients straight to `a`.
    pub fn straight_through(&self, a: Var, value: Tensor) -> Var {
        assert_eq!(self.shape(a), value.shape(), "straight_through shape mismatch");
        let rg = self.rg(&[a]);
        self.push(value, Op::StraightThrough(a), rg)
    }

    // ----- backward ---------------------------------------------------

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if matches!(nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            } else {
                self.backward_node(&nodes, i, gy, &mut grads);
            }
        }
        Gradients { grads }
    }

    fn backward_node(&self, nodes: &[Node], i: usize, gy: Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, g: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let y = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy);
            }
            Op::Sub(a, b) => {
                acc(*b, gy.map(|x| -x));
                acc(*a, gy);
            }
            Op::Mul(a, b) => {
                acc(*a, gy.zip_map(val(*b), |g, y| g * y));
                acc(*b, gy.zip_map(val(*a), |g, x| g * x));
            }
            Op::AddTrailing(a, b) => {
                let bv = val(*b);
                let mut gb = Tensor::zeros(bv.shape());
                for chunk in gy.data().chunks(bv.len()) {
                    for (d, s) in gb.data_mut().iter_mut().zip(chunk) {
                        *d += s;
                    }
                }
                acc(*b, gb);
                acc(*a, gy);
            }
            Op::MulTrailing(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = bv.len();
                let mut ga = gy.clone();
                for chunk in ga.data_mut().chunks_mut(n) {
                    for (d, s) in chunk.iter_mut().zip(bv.data()) {
                        *d *= s;
                    }
                }
                acc(*a, ga);
                let mut gb = Tensor::zeros(bv.shape());
                for (gc, xc) in gy.data().chunks(n).zip(av.data().chunks(n)) {
                    for ((d, g), x) in gb.data_mut().iter_mut().zip(gc).zip(xc) {
                        *d += g * x;
                    }
                }
                acc(*b, gb);
            }
            Op::Scale(a, s) => acc(*a, gy.map(|g| g * s)),
            Op::AddScalar(a) => acc(*a, gy),
            Op::Unary(a, kind) => {
                let x = val(*a);
                let g = match kind {
                    Unary::Exp => gy.zip_map(y, |g, y| g * y),
                    Unary::Log => gy.zip_map(x, |g, x| g / x),
                    Unary::Sqr => gy.zip_map(x, |g, x| 2.0 * g * x),
                    Unary::Sqrt => gy.zip_map(y, |g, y| 0.5 * g / y),
                    Unary::Tanh => gy.zip_map(y, |g, y| g * (1.0 - y * y)),
                    Unary::Relu => gy.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }),
                    Unary::Silu => gy.zip_map(x, |g, x| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * (s + x * s * (1.0 - s))
                    }),
                    Unary::Gelu => gy.zip_map(x, |g, x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    }),
                };
                acc(*a, g);
            }
            Op::MatMul { a, b, ta, tb, dims } => {
                let [ar, ac, br, bc, batch] = *dims;
                let (av, bv) = (val(*a), val(*b));
                let (m, _) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                let dc = gy.data();
                if nodes[a.0].requires_grad {
                    let ga = if !*ta {
                        bmm(dc, m, n, false, bv.data(), br, bc, !*tb, batch)
                    } else {
                        bmm(bv.data(), br, bc, *tb, dc, m, n, true, batch)
                    };
                    acc(*a, Tensor::new(av.shape(), ga));
                }
                if nodes[b.0].requires_grad {
                    let gb = if !*tb {
                        bmm(av.data(), ar, ac, !*ta, dc, m, n, false, batch)
                    } else {
                        bmm(dc, m, n, true, av.data(), ar, ac, *ta, batch)
                    };
                    acc(*b, Tensor::new(bv.shape(), gb));
                }
            }
            Op::Softmax(a) => {
                let c = y.last_dim();
                let mut g = gy;
                for (gr, yr) in g.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for (gi, yi) in gr.iter_mut().zip(yr) {
                        *gi = yi * (*gi - dot);
                    }
                }
                acc(*a, g);
            }
            Op::LayerNorm { x, inv_std } => {
                let c = y.last_dim();
                let mut g = gy;
                for ((gr, yr), is) in g
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(inv_std)
                {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                    for (gi, yi) in gr.iter_mut().zip(yr) {
                        *gi = is * (*gi - mg - yi * mgy);
                    }
                }
                acc(*x, g);
            }
            Op::NormalizeRows { x, norms } => {
                let c = y.last_dim();
                let mut g = gy;
                for ((gr, yr), n) in g.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for (gi, yi) in gr.iter_mut().zip(yr) {
                        *gi = (*gi - yi * dot) / n;
                    }
                }
                acc(*x, g);
            }
            Op::Reshape(a) => acc(*a, gy.reshape(val(*a).shape())),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                acc(*a, gy.permute(&inv));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = outer_inner(gy.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let shape = val(*p).shape();
                    let len = shape[*axis];
                    if nodes[p.0].requires_grad {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&gy.data()[base..base + len * inner]);
                        }
                        acc(*p, Tensor::new(shape, data));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = outer_inner(xs, *axis);
                let len = gy.shape()[*axis];
                let mut g = Tensor::zeros(xs);
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    g.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&gy.data()[src..src + len * inner]);
                }
                acc(*x, g);
            }
            Op::SumAll(a) => acc(*a, Tensor::full(val(*a).shape(), gy.item())),
            Op::MeanAll(a) => {
                let av = val(*a);
                acc(*a, Tensor::full(av.shape(), gy.item() / av.len() as f64));
            }
            Op::MeanAxis(a, axis) => {
                let xs = val(*a).shape();
                let (outer, n, inner) = outer_inner(xs, *axis);
                let inv = 1.0 / n as f64;
                let mut g = Tensor::zeros(xs);
                for o in 0..outer {
                    let src = &gy.data()[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let dst = &mut g.data_mut()[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                acc(*a, g);
            }
            Op::BroadcastAxis(a, axis) => {
                let xs = val(*a).shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis..].iter().product();
                let n = gy.shape()[*axis];
                let mut g = Tensor::zeros(xs);
                for o in 0..outer {
                    for j in 0..n {
                        let src = &gy.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                        let dst = &mut g.data_mut()[o * inner..(o + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                acc(*a, g);
            }
            Op::GatherRows(table, idx) => {
                let ts = val(*table).shape();
                let c = ts[1];
                let mut g = Tensor::zeros(ts);
                for (k, &r) in idx.iter().enumerate() {
                    let src = &gy.data()[k * c..(k + 1) * c];
                    for (d, s) in g.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                acc(*table, g);
            }
            Op::Unfold1d {
                x,
                kernel,
                stride,
                pad,
            } => {
                let xs = val(*x).shape();
                let (b, t, c) = (xs[0], xs[1], xs[2]);
                let t_out = gy.shape()[1];
                let mut g = Tensor::zeros(xs);
                for bi in 0..b {
                    for to in 0..t_out {
                        for j in 0..*kernel {
                            let ti = (to * stride + j) as isize - *pad as isize;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            let dst = (bi * t + ti as usize) * c;
                            let src = ((bi * t_out + to) * kernel + j) * c;
                            for k in 0..c {
                                g.data_mut()[dst + k] += gy.data()[src + k];
                            }
                        }
                    }
                }
                acc(*x, g);
            }
            Op::TimeMix(x, mix) => {
                let xs = val(*x).shape();
                let (b, t, c) = (xs[0], xs[1], xs[2]);
                let to = mix.shape()[0];
                let mut data = Vec::with_capacity(b * t * c);
                for bi in 0..b {
                    let blk = &gy.data()[bi * to * c..(bi + 1) * to * c];
                    data.extend(bmm(mix.data(), to, t, true, blk, to, c, false, 1));
                }
                acc(*x, Tensor::new(xs, data));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.last_dim();
                let s = gy.item() / n as f64;
                let mut g = probs.clone();
                for (i, row) in g.data_mut().chunks_mut(c).enumerate() {
                    row[labels[i]] -= 1.0;
                    for x in row.iter_mut() {
                        *x *= s;
                    }
                }
                acc(*logits, g);
            }
            Op::WeightedLse { x, weights } => {
                let xv = val(*x);
                let c = xv.last_dim();
                let mut g = Tensor::zeros(xv.shape());
                for (r, ((gr, xr), wr)) in g
                    .data_mut()
                    .chunks_mut(c)
                    .zip(xv.data().chunks(c))
                    .zip(weights.data().chunks(c))
                    .enumerate()
                {
                    let (yr, gyr) = (y.data()[r], gy.data()[r]);
                    for ((gi, &xi), &wi) in gr.iter_mut().zip(xr).zip(wr) {
                        if wi > 0.0 {
                            *gi = gyr * wi * (xi - yr).exp();
                        }
                    }
                }
                acc(*x, g);
            }
            Op::GradReverse(a, s) => acc(*a, gy.map(|g| -s * g)),
            Op::StraightThrough(a) => acc(*a, gy.clone()),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_trailing(a: &[usize], b: &[usize]) {
    assert!(
        b.len() <= a.len() && a[a.len() - b.len()..] == *b,
        "shape {b:?} is not a trailing suffix of {a:?}"
    );
}
