//! Central-difference checks for every differentiable graph op.

use motif_nn::layers::{band_mask, interpolation_matrix, Conv1d, MultiHeadAttention, TransformerBlock};
use motif_nn::{Bound, Graph, ParamBuilder, ParamSet, Tensor, Unary, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Compares the analytic gradient of `f` w.r.t. each input with central
/// differences, after contracting the output with a fixed random projection
/// so that every output element matters.
fn check(inputs: Vec<Tensor>, f: impl Fn(&Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |xs: &[Tensor], proj: Option<&Tensor>| -> (f64, Option<Vec<Tensor>>, Tensor) {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars);
        let shape = g.shape(out);
        let proj_t = match proj {
            Some(p) => p.clone(),
            None => Tensor::from_fn(&shape, |i| ((i * 7919 % 113) as f64 / 113.0) - 0.4),
        };
        let pv = g.constant(proj_t.clone());
        let loss = g.sum(g.mul(out, pv));
        let value = g.value(loss).item();
        let grads = g.backward(loss);
        let gs = vars.iter().map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&g.shape(*v)))).collect();
        (value, Some(gs), proj_t)
    };
    let (_, grads, proj) = eval(&inputs, None);
    let grads = grads.unwrap();
    for (i, x) in inputs.iter().enumerate() {
        // check a sample of coordinates to keep runtime small
        let n = x.len();
        let picks: Vec<usize> = if n <= 24 { (0..n).collect() } else { (0..24).map(|_| rng.random_range(0..n)).collect() };
        for j in picks {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let fd = (eval(&plus, Some(&proj)).0 - eval(&minus, Some(&proj)).0) / (2.0 * STEP);
            let an = grads[i].data()[j];
            let err = (fd - an).abs() / (1.0f64).max(fd.abs()).max(an.abs());
            assert!(err < TOL, "input {i} coord {j}: analytic {an} vs numeric {fd}");
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check(vec![a.clone()], |g, v| g.scale(g.add_scalar(v[0], 0.3), -1.7));
    for kind in [Unary::Exp, Unary::Sqr, Unary::Tanh, Unary::Silu, Unary::Gelu] {
        check(vec![a.clone()], move |g, v| g.unary(v[0], kind));
    }
    let pos = a.map(|x| x.abs() + 0.5);
    check(vec![pos.clone()], |g, v| g.log(v[0]));
    check(vec![pos], |g, v| g.unary(v[0], Unary::Sqrt));
}

#[test]
fn trailing_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[4], &mut rng);
    let m = random(&[3, 4], &mut rng);
    check(vec![a.clone(), b.clone()], |g, v| g.add_trailing(v[0], v[1]));
    check(vec![a.clone(), b], |g, v| g.mul_trailing(v[0], v[1]));
    check(vec![a, m], |g, v| g.mul_trailing(v[0], v[1]));
}

#[test]
fn matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 4], &mut rng);
    let w = random(&[4, 5], &mut rng);
    check(vec![x.clone(), w], |g, v| g.matmul(v[0], v[1]));
    let wt = random(&[5, 4], &mut rng);
    check(vec![x.clone(), wt], |g, v| g.matmul_t(v[0], v[1], false, true));
    let y = random(&[2, 4, 6], &mut rng);
    check(vec![x.clone(), y], |g, v| g.matmul(v[0], v[1]));
    let z = random(&[2, 5, 4], &mut rng);
    check(vec![x.clone(), z], |g, v| g.matmul_t(v[0], v[1], false, true));
    let u = random(&[2, 3, 5], &mut rng);
    check(vec![x.clone(), u.clone()], |g, v| g.matmul_t(v[0], v[1], true, false));
    let s = random(&[2, 5, 3], &mut rng);
    check(vec![x, s], |g, v| g.matmul_t(v[0], v[1], true, true));
}

#[test]
fn normalisations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[3, 5], &mut rng);
    check(vec![a.clone()], |g, v| g.softmax(v[0]));
    check(vec![a.clone()], |g, v| g.layer_norm(v[0]));
    check(vec![a], |g, v| g.normalize_rows(v[0]));
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 2, 4], &mut rng);
    check(vec![a.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
    check(vec![a.clone()], |g, v| g.reshape(v[0], &[6, 4]));
    check(vec![a.clone(), b], |g, v| g.concat(&[v[0], v[1]], 1));
    check(vec![a.clone()], |g, v| g.narrow(v[0], 1, 1, 2));
    check(vec![a.clone()], |g, v| g.narrow(v[0], 2, 1, 3));
    check(vec![a.clone()], |g, v| g.broadcast_axis(v[0], 1, 3));
    check(vec![a.clone()], |g, v| g.mean_axis(v[0], 1));
    check(vec![a.clone()], |g, v| g.mean(v[0]));
    check(vec![a], |g, v| g.sum(v[0]));
}

#[test]
fn indexing_and_sequence_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let table = random(&[5, 3], &mut rng);
    check(vec![table], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
    let x = random(&[2, 7, 3], &mut rng);
    check(vec![x.clone()], |g, v| g.unfold1d(v[0], 5, 2, 2));
    check(vec![x.clone()], |g, v| g.unfold1d(v[0], 3, 1, 1));
    let mix = interpolation_matrix(7, 11);
    check(vec![x], move |g, v| g.time_mix(v[0], &mix));
}

#[test]
fn loss_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random(&[4, 3], &mut rng);
    check(vec![logits.clone()], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]));
    let w = Tensor::from_fn(&[4, 3], |i| if i % 4 == 1 { 0.0 } else { (i as f64 * 0.3).cos().abs() + 0.1 });
    check(vec![logits], move |g, v| g.weighted_logsumexp(v[0], &w));
}

#[test]
fn gradient_routing() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&[3, 2], &mut rng);
    // grad_reverse is not the derivative of its forward map; check the
    // explicit contract instead.
    let g = Graph::new();
    let x = g.param(a.clone());
    let y = g.grad_reverse(x, 0.1);
    let loss = g.sum(g.sqr(y));
    let grads = g.backward(loss);
    for (gx, xv) in grads.get(x).unwrap().data().iter().zip(a.data()) {
        assert_eq!(*gx, -0.1 * 2.0 * xv);
    }
    let g = Graph::new();
    let x = g.param(a.clone());
    let target = Tensor::from_fn(&[3, 2], |i| i as f64);
    let y = g.straight_through(x, target.clone());
    assert_eq!(*g.value(y), target);
    let loss = g.sum(y);
    let grads = g.backward(loss);
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn attention_and_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ps = ParamSet::new();
    let mut init = ChaCha8Rng::seed_from_u64(10);
    let mut pb = ParamBuilder::new(&mut ps, &mut init);
    let attn = MultiHeadAttention::new(&mut pb.sub("a"), 4, 3, 2, 3);
    let block = TransformerBlock::new(&mut pb.sub("b"), 4, 2, 2);
    let conv = Conv1d::new(&mut pb.sub("c"), 4, 2, 3, 2);
    let q = random(&[2, 5, 4], &mut rng);
    let c = random(&[2, 3, 3], &mut rng);
    let mut inputs = vec![q, c];
    inputs.extend(ps.values().iter().cloned());
    let mask = band_mask(5, 1);
    check(inputs, move |g, v| {
        let bound = Bound::from_vars(v[2..].to_vec());
        let m = g.constant(mask.clone());
        let h = attn.forward(g, &bound, v[0], v[1], None);
        let h = block.forward(g, &bound, h, Some(m), 0.0);
        conv.forward(g, &bound, h)
    });
}
