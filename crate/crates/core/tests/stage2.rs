mod common;

use common::{jitter, small_training, tiny_stage1, tiny_stage2};
use motif_core::checkpoint::params_digest;
use motif_core::data_synth::TrainingSet;
use motif_core::harness::{grad_check_graph, GradCheckConfig};
use motif_core::motif_predictor::{
    load_stage2, loss_predictor, loss_predictor_graph, save_stage2, stage2_samples, train_stage2,
    PredictorConfig, PredictorModel,
};
use motif_core::motif_vq::train_stage1;
use motif_nn::{Graph, Tensor};

fn tiny_inputs(cfg: &PredictorConfig) -> (Tensor, Vec<usize>, Tensor) {
    let b = 3;
    let obs = Tensor::from_fn(&[b, cfg.obs_dim], |i| (i as f64 * 0.71).sin());
    let instr = vec![0, 2, 1];
    let target = Tensor::from_fn(&[b, cfg.latent_num, cfg.d_e], |i| (i as f64 * 0.37).cos());
    (obs, instr, target)
}

#[test]
fn predictor_gradient_matches_finite_differences() {
    let cfg = PredictorConfig::tiny();
    let mut model = PredictorModel::new(&cfg, 2).unwrap();
    jitter(&mut model.params, 0.05, 3);
    let (obs, instr, target) = tiny_inputs(&cfg);
    let gc = GradCheckConfig {
        coords_per_param: 4,
        ..Default::default()
    };
    let report = grad_check_graph(&model.params, &[], &gc, |g, p| {
        let z = model.predict_graph(g, p, &obs, &instr)?;
        Ok(loss_predictor_graph(g, z, &target))
    })
    .unwrap();
    assert!(
        report.passed(),
        "max rel error {} at {:?}",
        report.max_rel_error(),
        report.failures().first()
    );
}

#[test]
fn graph_loss_matches_data_level_loss() {
    let cfg = PredictorConfig::tiny();
    let model = PredictorModel::new(&cfg, 2).unwrap();
    let (obs, instr, target) = tiny_inputs(&cfg);
    let z = model.predict_motifs(&obs, &instr).unwrap();
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let zg = model.predict_graph(&g, &p, &obs, &instr).unwrap();
    let l = g.value(loss_predictor_graph(&g, zg, &target)).item();
    assert!((l - loss_predictor(&z, &target).unwrap()).abs() < 1e-12);
}

#[test]
fn training_is_deterministic_and_leaves_stage1_frozen() {
    let (corpus, split) = small_training();
    let set = TrainingSet::new(&corpus, &split).unwrap();
    let s1 = train_stage1(&set, &tiny_stage1(), 4).unwrap();
    let before = params_digest(&s1.model.params);
    let cfg = tiny_stage2();
    let a = train_stage2(&set, &s1, &cfg, 6).unwrap();
    let b = train_stage2(&TrainingSet::new(&corpus, &split).unwrap(), &s1, &cfg, 6).unwrap();
    assert!(a.log.step_losses.len() >= 10);
    assert_eq!(a.log.step_losses[..10], b.log.step_losses[..10]);
    assert_eq!(params_digest(&a.model.params), params_digest(&b.model.params));
    assert_eq!(params_digest(&s1.model.params), before);
    assert_eq!(a.stage1_digest, before);
    assert!(set.log().violations(&split).is_empty());

    let samples = stage2_samples(&set, &s1, 8).unwrap();
    assert!(!samples.is_empty());
    for s in &samples {
        assert_eq!(s.target.shape(), &[s1.model.config.m, s1.model.config.d_e]);
    }

    let dir = tempfile::tempdir().unwrap();
    save_stage2(dir.path(), &a).unwrap();
    let back = load_stage2(dir.path()).unwrap();
    assert_eq!(params_digest(&back.model.params), params_digest(&a.model.params));
    assert_eq!(back.stage1_digest, a.stage1_digest);
    assert_eq!(back.log, a.log);
}

#[test]
fn wrong_checkpoint_kind_is_rejected() {
    let (corpus, split) = small_training();
    let set = TrainingSet::new(&corpus, &split).unwrap();
    let s1 = train_stage1(&set, &tiny_stage1(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    motif_core::motif_vq::save_stage1(dir.path(), &s1).unwrap();
    assert!(load_stage2(dir.path()).is_err());
}
