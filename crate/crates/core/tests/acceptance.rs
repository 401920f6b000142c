//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Numeric arguments select a subset of criteria.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{jitter, small_training, tiny_run_config, tiny_stage1, tiny_stage2};
use motif_core::canonicalize::{anchor_of, canonicalize_states, decanonicalize_segment, CanonicalSegment};
use motif_core::data_synth::{
    allocate_interleaved, generate_corpus, BenchmarkConfig, BenchmarkSplit, Corpus, PairSplit, Role,
    TrainingSet,
};
use motif_core::flow_policy::{
    euler_integrate, sample_flow_time, train_stage3, PolicyConfig, PolicyInput, PolicyModel, Stage3Config,
};
use motif_core::geom::{wrap_angle, Pose2};
use motif_core::harness::{
    emit_report, eval_metrics, grad_check_graph, run_ablation_matrix, train_variant, GradCheckConfig,
    PipelineConfig, RunConfig, Variant,
};
use motif_core::motif_predictor::{loss_predictor_graph, train_stage2, PredictorConfig, PredictorModel};
use motif_core::motif_vq::{
    evaluate_stage1, progress_alignment, quantize, stage1_samples, train_stage1, LossOptions,
    MotifEncoderConfig, Stage1Batch, Stage1Config, Stage1Sample, TrainedStage1, VqModel,
};
use motif_nn::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> std::result::Result<(), String> {
    ensure(elapsed.as_secs_f64() <= limit_s, || {
        format!("{what} took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

// ---------------------------------------------------------------- shared data

const CORPUS_SEED: u64 = 7;
const HELD_OUT_SEED: u64 = 8;

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| generate_corpus(&BenchmarkConfig::default(), CORPUS_SEED).unwrap())
}

fn held_out() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| generate_corpus(&BenchmarkConfig::default(), HELD_OUT_SEED).unwrap())
}

fn split(k: usize) -> BenchmarkSplit {
    let c = corpus();
    allocate_interleaved(c, &c.config.layout, k).unwrap()
}

/// Desk Stage I on the K=5 split, with its wall time.
fn stage1_run(seed: u64) -> (TrainedStage1, Duration) {
    let s = split(5);
    let set = TrainingSet::new(corpus(), &s).unwrap();
    let t0 = Instant::now();
    let trained = train_stage1(&set, &Stage1Config::desk(), seed).unwrap();
    (trained, t0.elapsed())
}

fn stage1_seed1() -> &'static (TrainedStage1, Duration) {
    static R: OnceLock<(TrainedStage1, Duration)> = OnceLock::new();
    R.get_or_init(|| stage1_run(1))
}

fn held_out_windows(trained: &TrainedStage1) -> Vec<Stage1Sample> {
    let c = held_out();
    let all = allocate_interleaved(c, &c.config.layout, c.config.episodes_per_pair).unwrap();
    let set = TrainingSet::new(c, &all).unwrap();
    let cfg = &trained.config;
    stage1_samples(&set, cfg.model.h_s, cfg.stride, cfg.canonical, Some(&trained.transform))
        .unwrap()
        .0
}

// ------------------------------------------------------------- 1: gradients

fn tiny_stage1_batch(cfg: &MotifEncoderConfig) -> Stage1Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = 4;
    Stage1Batch {
        x: Tensor::from_fn(&[b, cfg.h_s, cfg.state_dim], |_| rng.random_range(-1.0..1.0)),
        progress: (0..b).map(|i| i as f64 * 0.05).collect(),
        instruction: (0..b).map(|i| i % 2).collect(),
        embodiment: (0..b).map(|i| i % cfg.num_embodiments).collect(),
    }
}

fn gradients() -> Check {
    let t0 = Instant::now();
    let gc = GradCheckConfig {
        coords_per_param: 4,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    let mut record = |name: &str, report: motif_core::harness::GradCheckReport| {
        worst = worst.max(report.max_rel_error());
        ensure(report.passed(), || {
            format!("{name}: max rel error {:.2e} at {:?}", report.max_rel_error(), report.failures().first())
        })
    };

    let model = VqModel::new(&MotifEncoderConfig::tiny(), 3).unwrap();
    let batch = tiny_stage1_batch(&model.config);
    let snapshot = {
        let g = Graph::new();
        let p = model.params.bind(&g, false);
        model.loss_graph(&g, &p, &batch, &LossOptions::default()).unwrap().snapshot
    };
    let opts = LossOptions {
        reverse_adv: false,
        snapshot,
        ..Default::default()
    };
    for term in ["vq", "nce", "adv"] {
        let report = grad_check_graph(&model.params, &[], &gc, |g, p| {
            let out = model.loss_graph(g, p, &batch, &opts)?;
            Ok(match term {
                "vq" => out.vq,
                "nce" => out.nce.expect("batch has positives"),
                _ => out.adv.expect("adversarial term enabled"),
            })
        })
        .map_err(|e| e.to_string())?;
        record(term, report)?;
    }

    let pc = PredictorConfig::tiny();
    let mut pred = PredictorModel::new(&pc, 2).unwrap();
    jitter(&mut pred.params, 0.05, 3);
    let obs = Tensor::from_fn(&[3, pc.obs_dim], |i| (i as f64 * 0.71).sin());
    let instr = vec![0, 2, 1];
    let target = Tensor::from_fn(&[3, pc.latent_num, pc.d_e], |i| (i as f64 * 0.37).cos());
    let report = grad_check_graph(&pred.params, &[], &gc, |g, p| {
        let z = pred.predict_graph(g, p, &obs, &instr)?;
        Ok(loss_predictor_graph(g, z, &target))
    })
    .map_err(|e| e.to_string())?;
    record("predictor", report)?;

    for use_motif in [true, false] {
        let c = PolicyConfig {
            use_motif,
            ..PolicyConfig::tiny()
        };
        let mut policy = PolicyModel::new(&c, 5).unwrap();
        jitter(&mut policy.params, 0.1, 8);
        let a = c.max_action_dim();
        let emb = vec![0, 1, 1];
        let state = Tensor::from_fn(&[3, c.state_dim], |i| (i as f64 * 0.53).sin());
        let obs = Tensor::from_fn(&[3, c.obs_dim], |i| (i as f64 * 0.29).cos());
        let instr = vec![2, 0, 1];
        let motifs = Tensor::from_fn(&[3, c.motif_tokens, c.d_e], |i| (i as f64 * 0.91).sin());
        let x_tau = Tensor::from_fn(&[3, c.h_a, a], |i| (i as f64 * 0.17).cos());
        let target = Tensor::from_fn(&[3, c.h_a, a], |i| (i as f64 * 0.41).sin());
        let mask = policy.action_mask(&emb).unwrap();
        let input = PolicyInput {
            embodiment: &emb,
            state: &state,
            obs: &obs,
            instruction: &instr,
            motifs: use_motif.then_some(&motifs),
        };
        let report = grad_check_graph(&policy.params, &[], &gc, |g, p| {
            let v = policy.velocity_graph(g, p, &input, &x_tau, &[0, 4, 9])?;
            let r = g.sub(v, g.constant(target.clone()));
            let sq = g.mul(g.sqr(r), g.constant(mask.clone()));
            Ok(g.scale(g.sum(sq), 1.0 / mask.sum()))
        })
        .map_err(|e| e.to_string())?;
        record(if use_motif { "flow" } else { "flow without motifs" }, report)?;
    }
    within(t0.elapsed(), 60.0, "gradient suite")?;
    Ok(format!("max rel error {worst:.2e}"))
}

// -------------------------------------------------------------- 2: reversal

fn encoder_adv_grads(model: &VqModel, batch: &Stage1Batch, reverse: bool) -> Vec<Tensor> {
    let g = Graph::new();
    let p = model.params.bind(&g, true);
    let opts = LossOptions {
        reverse_adv: reverse,
        ..Default::default()
    };
    let out = model.loss_graph(&g, &p, batch, &opts).unwrap();
    let grads = g.backward(out.adv.unwrap());
    let all = p.grads(&g, &grads);
    model.encoder_param_ids().into_iter().map(|i| all[i].clone()).collect()
}

fn reversal() -> Check {
    let model = VqModel::new(&MotifEncoderConfig::tiny(), 3).unwrap();
    let lambda = model.config.lambda_adv;
    ensure(lambda == 0.1, || format!("default λ_adv {lambda}"))?;
    let batch = tiny_stage1_batch(&model.config);
    let with = encoder_adv_grads(&model, &batch, true);
    let without = encoder_adv_grads(&model, &batch, false);
    let global = lambda * without.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    ensure(global > 0.0, || "no adversarial gradient reaches the encoder".into())?;
    let mut worst = 0.0f64;
    for (a, b) in with.iter().zip(&without) {
        let want = b.map(|y| -lambda * y);
        let err = a.zip_map(&want, |x, y| x - y).sq_norm().sqrt();
        // tensors with a vanishing true gradient carry only roundoff
        let scale = want.sq_norm().sqrt().max(1e-6 * global);
        worst = worst.max(err / scale);
    }
    ensure(worst <= 1e-10, || format!("relative error {worst:.2e}"))?;
    Ok(format!("{} encoder tensors, max rel error {worst:.2e}", with.len()))
}

// ------------------------------------------------------ 3: canonicalization

fn canonicalization() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut emb = BenchmarkConfig::default().embodiments[0].clone();
    let (mut inv, mut round) = (0.0f64, 0.0f64);
    let diff = |a: &[f64], b: &[f64]| {
        (0..4)
            .map(|d| if d == 2 { wrap_angle(a[d] - b[d]).abs() } else { (a[d] - b[d]).abs() })
            .fold(0.0, f64::max)
    };
    for _ in 0..1000 {
        let t = 32;
        let states = Tensor::from_fn(&[t, 4], |i| match i % 4 {
            0 | 1 => rng.random_range(-2.0..2.0),
            2 => rng.random_range(-3.1..3.1),
            _ => rng.random_range(0.0..1.0),
        });
        let g = Pose2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-3.1..3.1));
        let moved = Tensor::from_fn(&[t, 4], |i| {
            let s = states.row(i / 4);
            let p = g.apply([s[0], s[1]]);
            [p[0], p[1], s[2] + g.theta, s[3]][i % 4]
        });
        emb.workspace_radius = rng.random_range(0.5..2.0);
        let a = canonicalize_states(&states, emb.workspace_radius).map_err(|e| e.to_string())?;
        let b = canonicalize_states(&moved, emb.workspace_radius).map_err(|e| e.to_string())?;
        for i in 0..t {
            inv = inv.max(diff(a.row(i), b.row(i)));
        }
        let cseg = CanonicalSegment {
            values: a,
            progress: 0.0,
            instruction: 0,
            embodiment_id: emb.id.clone(),
        };
        let back = decanonicalize_segment(&cseg, anchor_of(&states), &emb);
        for i in 0..t {
            round = round.max(diff(back.row(i), states.row(i)));
        }
    }
    ensure(inv <= 1e-9, || format!("invariance deviation {inv:.2e}"))?;
    ensure(round <= 1e-9, || format!("round-trip error {round:.2e}"))?;
    within(t0.elapsed(), 10.0, "canonicalization checks")?;
    Ok(format!("invariance {inv:.1e}, round trip {round:.1e}"))
}

// ------------------------------------------------------------ 4: quantizer

fn quantization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ties = 0;
    for case in 0..10_000 {
        let n = rng.random_range(1..8);
        let d = rng.random_range(1..6);
        let k = rng.random_range(1..16);
        // coarse integer grids make exact ties common
        let coarse = case % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| {
            if coarse {
                rng.random_range(-2..=2) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        };
        let codebook = Tensor::from_fn(&[k, d], |_| draw(&mut rng));
        let z = Tensor::from_fn(&[n, d], |_| draw(&mut rng));
        let q = quantize(&z, &codebook).map_err(|e| e.to_string())?;
        for i in 0..n {
            let dists: Vec<f64> = (0..k)
                .map(|j| (0..d).map(|c| (z.row(i)[c] - codebook.row(j)[c]).powi(2)).sum())
                .collect();
            let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let want = dists.iter().position(|&x| x == best).unwrap();
            if dists.iter().filter(|&&x| x == best).count() > 1 {
                ties += 1;
            }
            ensure(q.indices[i] == want, || format!("case {case} row {i}: {} vs oracle {want}", q.indices[i]))?;
            ensure(q.values.row(i) == codebook.row(want), || format!("case {case} row {i}: value mismatch"))?;
        }
        let again = quantize(&q.values, &codebook).map_err(|e| e.to_string())?;
        ensure(again == q, || format!("case {case}: quantization not idempotent"))?;
    }
    ensure(ties > 0, || "no ties exercised".into())?;
    Ok(format!("10000 instances agree with the oracle, {ties} ties"))
}

// -------------------------------------------------------------- 5: sampler

fn sampler() -> Check {
    let c = PolicyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 1_000_000;
    let (mut sum, mut max) = (0.0, 0.0f64);
    for _ in 0..n {
        let t = sample_flow_time(&mut rng, &c).map_err(|e| e.to_string())?;
        sum += t.tau;
        max = max.max(t.tau);
    }
    let mean = sum / n as f64;
    let want = 0.999 * 1.5 / 2.5;
    ensure((mean - want).abs() <= 1e-3, || format!("mean {mean:.5} vs {want}"))?;
    ensure(max < 0.999, || format!("max {max}"))?;
    Ok(format!("mean {mean:.5}, max {max:.5}"))
}

// ---------------------------------------------------------------- 6: Euler

fn ode() -> Check {
    let x0 = Tensor::new(&[1], vec![1.0]);
    let e = std::f64::consts::E;
    let mut prev: Option<(f64, f64)> = None;
    let mut ratios = Vec::new();
    for n in [1usize, 2, 4, 8, 16] {
        let x = euler_integrate(&x0, n, |x, _| Ok(x.clone())).map_err(|e| e.to_string())?.data()[0];
        let exact = (1.0 + 1.0 / n as f64).powi(n as i32);
        ensure((x - exact).abs() < 1e-12, || format!("n={n}: {x} vs {exact}"))?;
        let err = e - x;
        if let Some((last, last_err)) = prev {
            ensure(x > last, || format!("n={n}: not increasing"))?;
            let ratio = err / last_err;
            ensure((0.4..=0.6).contains(&ratio), || format!("n={n}: error ratio {ratio:.3}"))?;
            ratios.push(format!("{ratio:.3}"));
        }
        prev = Some((x, err));
    }
    Ok(format!("error ratios {}", ratios.join(" ")))
}

// ------------------------------------------------------------ 7: Stage I

fn stage1_outcome() -> Check {
    let (trained, elapsed) = stage1_seed1();
    let cfg = &trained.config.model;
    ensure(cfg.codebook_size == 128 && cfg.m == 16 && cfg.h_s == 32, || "unexpected Stage I shape".into())?;
    ensure(trained.config.train.epochs == 20, || "expected 20 epochs".into())?;
    let eval = evaluate_stage1(&trained.model, &held_out_windows(trained)).map_err(|e| e.to_string())?;
    let detail = format!(
        "held-out MSE {:.4}, {}/128 codes, {:.0}s",
        eval.recon_mse,
        eval.codes_used,
        elapsed.as_secs_f64()
    );
    ensure(eval.recon_mse <= 0.05, || detail.clone())?;
    ensure(eval.codes_used >= 32, || detail.clone())?;
    within(*elapsed, 600.0, "Stage I training")?;
    Ok(detail)
}

// ------------------------------------------------------------ 8: alignment

fn alignment() -> Check {
    let mut gaps = Vec::new();
    for seed in [1u64, 2, 3] {
        let owned;
        let trained = if seed == 1 {
            &stage1_seed1().0
        } else {
            owned = stage1_run(seed).0;
            &owned
        };
        let windows = held_out_windows(trained);
        let step = (windows.len() / 2000).max(1);
        let sub: Vec<Stage1Sample> = windows.into_iter().step_by(step).collect();
        let stats = progress_alignment(&trained.model, &sub).map_err(|e| e.to_string())?;
        gaps.push(stats.gap());
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let detail = format!(
        "mean gap {mean:.3} (seeds {})",
        gaps.iter().map(|g| format!("{g:.3}")).collect::<Vec<_>>().join(" ")
    );
    ensure(mean >= 0.05, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------- 9: ablation

fn ablation() -> Check {
    let cfg = RunConfig {
        ks: vec![5],
        seeds: vec![1, 2, 3],
        variants: vec![Variant::Full, Variant::NoMotif, Variant::NoCanonicalization],
        rollouts: 20,
        pipeline: PipelineConfig::desk(),
        ..Default::default()
    };
    let t0 = Instant::now();
    let report = run_ablation_matrix(&cfg, corpus()).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let transfer = |v| report.row(v, 5).map(|r| 100.0 * r.transfer_mean).unwrap_or(f64::NAN);
    let (full, plain, raw) = (
        transfer(Variant::Full),
        transfer(Variant::NoMotif),
        transfer(Variant::NoCanonicalization),
    );
    let detail = format!(
        "Transfer full {full:.1}%, no-motif {plain:.1}%, no-canonicalization {raw:.1}%, {:.1} min",
        elapsed.as_secs_f64() / 60.0
    );
    ensure(full - plain >= 5.0, || detail.clone())?;
    ensure(full - raw >= 5.0, || detail.clone())?;
    within(elapsed, 45.0 * 60.0, "ablation matrix")?;
    Ok(detail)
}

// -------------------------------------------------------------- 10: metric

fn metric() -> Check {
    let mut pairs = Vec::new();
    for e in 0..3 {
        for t in 0..4 {
            pairs.push(PairSplit {
                embodiment_id: format!("r{e}"),
                task_id: format!("t{t}"),
                role: if t < 2 { Role::Few } else { Role::Full },
                episodes: vec![0],
            });
        }
    }
    let split = BenchmarkSplit { k: 1, pairs };
    let few = [0.98, 0.14, 0.70, 0.02, 0.30, 0.02];
    let mut it = few.iter();
    let rates: Vec<_> = split
        .pairs
        .iter()
        .map(|p| {
            let r = if p.role == Role::Few { *it.next().unwrap() } else { 0.9 };
            (p.embodiment_id.clone(), p.task_id.clone(), r)
        })
        .collect();
    let m = eval_metrics(&rates, &split).map_err(|e| e.to_string())?;
    ensure((m.transfer - 0.36).abs() < 1e-12, || format!("Transfer {}", m.transfer))?;
    Ok(format!("Transfer {:.2}%", 100.0 * m.transfer))
}

// --------------------------------------------------------- 11: determinism

fn determinism() -> Check {
    let (corpus, split) = small_training();
    let first10 = |log: &motif_core::train::TrainLog| log.step_losses.iter().take(10).cloned().collect::<Vec<_>>();
    let run = || {
        let set = TrainingSet::new(&corpus, &split).unwrap();
        let s1 = train_stage1(&set, &tiny_stage1(), 9).unwrap();
        let s2 = train_stage2(&set, &s1, &tiny_stage2(), 9).unwrap();
        let mut c3 = Stage3Config::desk();
        c3.model = PolicyConfig::tiny();
        c3.stride = 8;
        c3.train.batch_size = 16;
        c3.train.epochs = 1;
        let s3 = train_stage3(&set, Some((&s1, &s2)), &c3, 9).unwrap();
        [first10(&s1.log), first10(&s2.log), first10(&s3.log)]
    };
    let (a, b) = (run(), run());
    for (stage, (x, y)) in a.iter().zip(&b).enumerate() {
        ensure(x.len() == 10, || format!("stage {} ran only {} steps", stage + 1, x.len()))?;
        ensure(x == y, || format!("stage {} losses differ", stage + 1))?;
    }

    let cfg = tiny_run_config();
    let ra = run_ablation_matrix(&cfg, &corpus).map_err(|e| e.to_string())?;
    let rb = run_ablation_matrix(&cfg, &corpus).map_err(|e| e.to_string())?;
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let files = emit_report(&ra, da.path()).map_err(|e| e.to_string())?;
    emit_report(&rb, db.path()).map_err(|e| e.to_string())?;
    for f in &files {
        let name = f.file_name().unwrap();
        ensure(fs::read(f).unwrap() == fs::read(db.path().join(name)).unwrap(), || {
            format!("{name:?} differs between runs")
        })?;
    }
    Ok(format!("3 stages x 10 steps identical, {} metric files identical", files.len()))
}

// --------------------------------------------------------------- 12: audit

fn audit() -> Check {
    let mut base = tiny_run_config().pipeline;
    base.stage1.train.epochs = 1;
    let mut touched = 0;
    for k in [1usize, 5] {
        let s = split(k);
        for variant in [Variant::Full, Variant::NoMotif, Variant::NoCanonicalization] {
            let run = train_variant(corpus(), &s, variant, &base, 1).map_err(|e| e.to_string())?;
            let bad = run.access.violations(&s);
            ensure(bad.is_empty(), || format!("K={k} {variant}: {} violations, first {:?}", bad.len(), bad[0]))?;
            let few: Vec<_> = run
                .access
                .distinct()
                .into_iter()
                .filter(|a| s.pair(&a.embodiment_id, &a.task_id).map(|p| p.role) == Some(Role::Few))
                .collect();
            ensure(few.iter().all(|a| a.index < k), || format!("K={k} {variant}: Few index ≥ K"))?;
            ensure(few.len() == k * s.few_pairs().count(), || {
                format!("K={k} {variant}: {} distinct Few episodes used", few.len())
            })?;
            touched += run.access.accesses.len();
        }
    }
    Ok(format!("0 violations over {touched} accesses"))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Check); 12] = [
        (1, "gradient suite", gradients),
        (2, "gradient reversal", reversal),
        (3, "canonicalization invariance", canonicalization),
        (4, "quantization", quantization),
        (5, "flow time sampler", sampler),
        (6, "Euler convergence", ode),
        (7, "Stage I outcome", stage1_outcome),
        (8, "progress alignment", alignment),
        (9, "directional ablation", ablation),
        (10, "Transfer metric", metric),
        (11, "determinism", determinism),
        (12, "protocol audit", audit),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} {name}: PASS ({detail}; {secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({detail}; {secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
