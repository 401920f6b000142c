use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use motif_core::flow_policy::{PolicyConfig, Stage3Config};
use motif_core::harness::{PipelineConfig, RunConfig, Variant};
use motif_core::motif_predictor::{PredictorConfig, Stage2Config};
use motif_core::motif_vq::{MotifEncoderConfig, Stage1Config};
use serde::Serialize;
use serde_json::Value;

fn motif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motif"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = motif(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_toml<T: Serialize>(path: &Path, value: &T) {
    fs::write(path, toml::to_string(value).unwrap()).unwrap();
}

fn tiny_stages() -> PipelineConfig {
    let mut stage1 = Stage1Config::desk();
    stage1.model = MotifEncoderConfig::tiny();
    stage1.stride = 8;
    stage1.train.batch_size = 16;
    stage1.train.epochs = 1;
    let mut stage2 = Stage2Config::desk();
    stage2.model = PredictorConfig::tiny();
    stage2.train.batch_size = 16;
    stage2.train.epochs = 1;
    let mut stage3 = Stage3Config::desk();
    stage3.model = PolicyConfig::tiny();
    stage3.model.h_a = 8;
    stage3.stride = 16;
    stage3.train.batch_size = 16;
    stage3.train.epochs = 1;
    PipelineConfig { stage1, stage2, stage3 }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow_from_corpus_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let ck = root.join("ckpts");
    let stages = tiny_stages();

    fs::write(root.join("bench.toml"), "episodes_per_pair = 3\n").unwrap();
    write_toml(&root.join("s1.toml"), &stages.stage1);
    write_toml(&root.join("s2.toml"), &stages.stage2);
    write_toml(&root.join("s3.toml"), &stages.stage3);

    let out = ok(&["gen-data", "--config", s(&root.join("bench.toml")), "--out", s(&data), "--seed", "5"]);
    assert!(out.contains("36 episodes"), "{out}");
    let split = data.join("split_k1.json");
    assert!(split.exists());
    assert!(!data.join("split_k5.json").exists());

    let common = ["--data", s(&data), "--split", s(&split), "--seed", "3"];
    let stage = |name: &str, extra: &[&str]| {
        let mut args = vec![name];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        ok(&args)
    };
    let (c1, c2, c3) = (ck.join("stage1"), ck.join("stage2"), ck.join("stage3"));
    stage("train-stage1", &["--config", s(&root.join("s1.toml")), "--out", s(&c1)]);
    stage("train-stage2", &["--config", s(&root.join("s2.toml")), "--stage1", s(&c1), "--out", s(&c2)]);
    let out = stage(
        "train-stage3",
        &["--config", s(&root.join("s3.toml")), "--stage1", s(&c1), "--stage2", s(&c2), "--out", s(&c3)],
    );
    assert!(out.contains("stage3 final loss"), "{out}");

    let query = serde_json::json!({
        "embodiment": "beta",
        "task": "place_a",
        "state": [1.7, 0.5, 2.0, 0.0],
        "observation": vec![0.1; 74],
    });
    let qpath = root.join("query.json");
    fs::write(&qpath, query.to_string()).unwrap();
    let infer = |seed: &str| {
        let text = ok(&["infer", "--ckpts", s(&ck), "--episode", s(&qpath), "--seed", seed]);
        serde_json::from_str::<Value>(&text).unwrap()
    };
    let chunk = infer("4");
    let rows = chunk["chunk"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.as_array().unwrap().len() == 5));
    assert_eq!(chunk, infer("4"));
    assert_ne!(chunk["chunk"], infer("5")["chunk"]);

    let metrics = root.join("metrics.json");
    ok(&[
        "eval", "--ckpts", s(&ck), "--data", s(&data), "--split", s(&split), "--rollouts", "2", "--out",
        s(&metrics),
    ]);
    let m: Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    let transfer = m["transfer"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&transfer));
    assert_eq!(m["rates"].as_array().unwrap().len(), 12);

    let runs = root.join("runs");
    let run_cfg = RunConfig {
        ks: vec![1],
        seeds: vec![1],
        variants: vec![Variant::NoMotif, Variant::Full],
        rollouts: 1,
        pipeline: stages,
        ..Default::default()
    };
    write_toml(&root.join("run.toml"), &run_cfg);
    let out = ok(&["ablate", "--config", s(&root.join("run.toml")), "--data", s(&data), "--out", s(&runs)]);
    assert!(out.contains("no-motif") && out.contains("full"), "{out}");
    let out = ok(&["report", "--runs", s(&runs), "--out", s(&root.join("again"))]);
    assert!(out.lines().count() >= 6, "{out}");
    for line in out.lines() {
        let again = Path::new(line);
        let name = again.file_name().unwrap();
        assert_eq!(fs::read(again).unwrap(), fs::read(runs.join(name)).unwrap(), "{name:?}");
    }
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = motif(&["train-stage3", "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = motif(&["train-stage3", "--data", "d", "--out", "o", "--no-motif", "--stage1", "a", "--stage2", "b"]);
    assert!(!out.status.success());

    fs::write(dir.path().join("bad.toml"), "episodes_per_pair = \"many\"\n").unwrap();
    let out = motif(&["gen-data", "--config", s(&dir.path().join("bad.toml")), "--out", s(&missing)]);
    assert!(!out.status.success());
    assert!(!missing.exists());
}
