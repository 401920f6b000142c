#![allow(dead_code)]

use std::collections::BTreeMap;

use motif_core::data_synth::{allocate_interleaved, generate_corpus, BenchmarkConfig, BenchmarkSplit, Corpus};
use motif_core::flow_policy::{PolicyConfig, Stage3Config};
use motif_core::harness::{PipelineConfig, RunConfig, Variant};
use motif_core::motif_predictor::{PredictorConfig, Stage2Config};
use motif_core::motif_vq::{MotifEncoderConfig, Stage1Config};
use motif_nn::ParamSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_training() -> (Corpus, BenchmarkSplit) {
    let cfg = BenchmarkConfig {
        episodes_per_pair: 3,
        ..Default::default()
    };
    let corpus = generate_corpus(&cfg, 5).unwrap();
    let split = allocate_interleaved(&corpus, &cfg.layout, 1).unwrap();
    (corpus, split)
}

pub fn tiny_stage1() -> Stage1Config {
    let mut cfg = Stage1Config::desk();
    cfg.model = MotifEncoderConfig::tiny();
    cfg.stride = 8;
    cfg.train.batch_size = 16;
    cfg.train.epochs = 1;
    cfg
}

pub fn tiny_stage2() -> Stage2Config {
    let mut cfg = Stage2Config::desk();
    cfg.model = PredictorConfig::tiny();
    cfg.stride = 8;
    cfg.train.batch_size = 16;
    cfg.train.epochs = 1;
    cfg
}

/// Adds uniform noise of width `scale` to every parameter, so that
/// zero-initialized gates pass gradient.
pub fn jitter(params: &mut ParamSet, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in 0..params.len() {
        for x in params.get_mut(id).data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

/// Two seeds of full and no-motif on tiny stages, two rollouts per pair.
pub fn tiny_run_config() -> RunConfig {
    let mut stage3 = Stage3Config::desk();
    stage3.model = PolicyConfig::tiny();
    stage3.model.h_a = 8;
    stage3.stride = 16;
    stage3.train.batch_size = 16;
    stage3.train.epochs = 1;
    RunConfig {
        ks: vec![1],
        seeds: vec![1, 2],
        variants: vec![Variant::Full, Variant::NoMotif],
        rollouts: 2,
        pipeline: PipelineConfig {
            stage1: tiny_stage1(),
            stage2: tiny_stage2(),
            stage3,
        },
        reference: BTreeMap::from([("full".to_string(), 50.0)]),
        ..Default::default()
    }
}
