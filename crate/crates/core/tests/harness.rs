mod common;

use std::fs;

use common::{small_training, tiny_run_config};
use motif_core::data_synth::{BenchmarkSplit, PairSplit, Role};
use motif_core::harness::{
    emit_report, eval_metrics, load_report, rollout, rollout_pair, rollout_scene, rollout_scenes,
    run_ablation_matrix, AblationReport, ExpertReplay, PipelineConfig, RolloutConfig, RunConfig,
    Variant, ZeroPolicy,
};
use motif_core::MotifError;

#[test]
fn expert_replay_succeeds_and_zero_policy_fails() {
    let (corpus, _) = small_training();
    let cfg = &corpus.config;
    let rc = RolloutConfig::default();
    for (e, t) in [(0, 0), (1, 1), (2, 2), (0, 3)] {
        let eps: Vec<_> = corpus
            .episodes
            .iter()
            .filter(|ep| ep.embodiment_id == cfg.embodiments[e].id && ep.task_id == cfg.tasks[t].id)
            .collect();
        assert!(!eps.is_empty());
        let scenes: Vec<_> = eps.iter().map(|ep| (ep.scene, ep.seed)).collect();
        let replay = ExpertReplay {
            episodes: eps.iter().map(|ep| (ep.seed, *ep)).collect(),
            horizon: 16,
        };
        let recs = rollout_scenes(&replay, cfg, e, t, &scenes, &rc).unwrap();
        assert!(recs.iter().all(|r| r.success), "expert replay failed on {e}/{t}");

        let zero = ZeroPolicy {
            horizon: 16,
            action_dim: cfg.embodiments[e].action_dim,
        };
        let recs = rollout_pair(&zero, cfg, e, t, 5, 100, &rc).unwrap();
        assert!(recs.iter().all(|r| !r.success));
        assert!(recs.iter().all(|r| r.steps > 0 && r.states.len() == r.steps + 1));
    }
}

#[test]
fn rollouts_are_deterministic_per_seed() {
    let (corpus, _) = small_training();
    let cfg = &corpus.config;
    let zero = ZeroPolicy {
        horizon: 16,
        action_dim: cfg.embodiments[1].action_dim,
    };
    let rc = RolloutConfig::default();
    let a = rollout(&zero, cfg, 1, 2, 77, &rc).unwrap();
    assert_eq!(a, rollout(&zero, cfg, 1, 2, 77, &rc).unwrap());
    assert_ne!(rollout_scene(cfg, 1, 2, 77).unwrap(), rollout_scene(cfg, 1, 2, 78).unwrap());
    let wrong = ZeroPolicy {
        horizon: 16,
        action_dim: 2,
    };
    assert!(rollout(&wrong, cfg, 1, 2, 77, &rc).is_err());
    assert!(rollout(&zero, cfg, 9, 2, 77, &rc).is_err());
}

#[test]
fn evaluation_scenes_differ_from_demonstrations() {
    let (corpus, _) = small_training();
    let cfg = &corpus.config;
    for ep in &corpus.episodes {
        let e = cfg.embodiment_index(&ep.embodiment_id).unwrap();
        let t = cfg.task_index(&ep.task_id).unwrap();
        for seed in [0, 1, ep.seed] {
            assert_ne!(rollout_scene(cfg, e, t, seed).unwrap(), ep.scene);
        }
    }
}

fn six_few_split() -> BenchmarkSplit {
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
    BenchmarkSplit { k: 1, pairs }
}

#[test]
fn transfer_of_reference_few_cells() {
    let split = six_few_split();
    let few = [0.98, 0.14, 0.70, 0.02, 0.30, 0.02];
    let mut it = few.iter();
    let rates: Vec<_> = split
        .pairs
        .iter()
        .map(|p| {
            let r = if p.role == Role::Few { *it.next().unwrap() } else { 0.5 };
            (p.embodiment_id.clone(), p.task_id.clone(), r)
        })
        .collect();
    let m = eval_metrics(&rates, &split).unwrap();
    assert!((m.transfer - 0.36).abs() < 1e-12, "{}", m.transfer);
    assert!((m.global - (2.16 + 3.0) / 12.0).abs() < 1e-12);

    let mut bad = rates.clone();
    bad[0].2 = 1.2;
    assert!(matches!(eval_metrics(&bad, &split), Err(MotifError::Domain(_))));
    bad.pop();
    assert!(eval_metrics(&bad, &split).is_err());
}

#[test]
fn variant_names_round_trip() {
    assert_eq!(Variant::ALL.len(), 5);
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!("no-such".parse::<Variant>().is_err());
    let base = PipelineConfig::desk();
    assert!(!Variant::NoMotif.apply(&base).stage3.model.use_motif);
    assert!(!Variant::NoCanonicalization.apply(&base).stage1.canonical);
    assert_eq!(Variant::NoNce.apply(&base).stage1.model.lambda_nce, 0.0);
    assert_eq!(Variant::NoAdv.apply(&base).stage1.model.lambda_adv, 0.0);
    assert_eq!(Variant::Full.apply(&base), base);
}

#[test]
fn ablation_reports_are_reproducible() {
    let (corpus, _) = small_training();
    let cfg = tiny_run_config();
    let a = run_ablation_matrix(&cfg, &corpus).unwrap();
    let b = run_ablation_matrix(&cfg, &corpus).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.runs.len(), 4);
    assert!(a.runs.iter().all(|r| r.violations == 0));
    let summary = a.summary();
    assert_eq!(summary.len(), 2);
    assert!(summary.iter().all(|s| s.runs == 2));
    let full = a.row(Variant::Full, 1).unwrap();
    assert_eq!(full.reference_transfer, Some(50.0));

    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let files = emit_report(&a, da.path()).unwrap();
    emit_report(&b, db.path()).unwrap();
    assert!(files.len() >= 6);
    for f in &files {
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(db.path().join(name)).unwrap(), "{name:?}");
    }
    assert_eq!(load_report(da.path()).unwrap(), a);
}

#[test]
fn empty_report_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let err = emit_report(&AblationReport::default(), &out).unwrap_err();
    assert!(matches!(err, MotifError::Incomplete(_)));
    assert!(!out.exists());
}

#[test]
fn invalid_run_configs_are_rejected() {
    let (corpus, _) = small_training();
    for cfg in [
        RunConfig { rollouts: 0, ..Default::default() },
        RunConfig { seeds: vec![], ..Default::default() },
        RunConfig { ks: vec![0], ..Default::default() },
        RunConfig { variants: vec![], ..Default::default() },
    ] {
        assert!(run_ablation_matrix(&cfg, &corpus).is_err());
    }
}
