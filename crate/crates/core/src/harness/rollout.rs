use motif_nn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_synth::{
    episode_len, episode_seed, BenchmarkConfig, Episode, Scene, World, OBS_DIM, STATE_DIM,
};
use crate::error::{MotifError, Result};
use crate::flow_policy::{condition_motifs, PolicyInput, TrainedStage3};
use crate::motif_predictor::TrainedStage2;
use crate::motif_vq::TrainedStage1;

/// Closed-loop execution settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Actions executed from each generated chunk.
    pub execute: usize,
    /// Step budget as a multiple of the embodiment's demonstration length.
    pub horizon_factor: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            execute: 8,
            horizon_factor: 1.5,
        }
    }
}

/// What a controller sees about one world at a decision point.
#[derive(Clone, Debug)]
pub struct WorldView {
    pub state: [f64; 4],
    pub obs: Vec<f64>,
    /// Rollout seed, for per-world noise.
    pub seed: u64,
    /// Environment steps taken so far.
    pub step: usize,
}

/// Anything that maps world views to action chunks `[H, action_dim]`.
pub trait ChunkPolicy {
    fn act(&self, embodiment: usize, instruction: usize, views: &[WorldView]) -> Result<Vec<Tensor>>;
}

/// The trained pipeline used as a controller.
#[derive(Clone, Debug)]
pub struct PolicyStack {
    pub motif: Option<(TrainedStage1, TrainedStage2)>,
    pub policy: TrainedStage3,
}

impl PolicyStack {
    pub fn new(motif: Option<(TrainedStage1, TrainedStage2)>, policy: TrainedStage3) -> Result<Self> {
        if policy.model.config.use_motif != motif.is_some() {
            return Err(MotifError::Config(
                "motif stages must be given exactly when the policy uses them".into(),
            ));
        }
        Ok(Self { motif, policy })
    }

    /// Errors unless the policy was trained for this embodiment.
    pub fn check_embodiment(&self, config: &BenchmarkConfig, e: usize) -> Result<()> {
        let dims = &self.policy.model.config.action_dims;
        match (config.embodiments.get(e), dims.get(e)) {
            (Some(spec), Some(&d)) if spec.action_dim == d => Ok(()),
            (Some(spec), _) => Err(MotifError::Config(format!(
                "checkpoint has no {}-dim action head for embodiment {}",
                spec.action_dim, spec.id
            ))),
            (None, _) => Err(MotifError::Domain(format!("unknown embodiment {e}"))),
        }
    }
}

impl ChunkPolicy for PolicyStack {
    fn act(&self, embodiment: usize, instruction: usize, views: &[WorldView]) -> Result<Vec<Tensor>> {
        let model = &self.policy.model;
        let c = &model.config;
        let norm = self
            .policy
            .norms
            .get(embodiment)
            .ok_or_else(|| MotifError::Domain(format!("unknown embodiment {embodiment}")))?;
        let b = views.len();
        let state: Vec<f64> = views.iter().flat_map(|v| norm.state(&v.state)).collect();
        let obs: Vec<f64> = views.iter().flat_map(|v| v.obs.iter().copied()).collect();
        let state = Tensor::new(&[b, STATE_DIM], state);
        let obs = Tensor::new(&[b, OBS_DIM], obs);
        let instr = vec![instruction; b];
        let emb = vec![embodiment; b];
        let motifs = match &self.motif {
            Some((s1, s2)) => Some(condition_motifs(s1, s2, &obs, &instr)?),
            None => None,
        };
        let per = c.h_a * c.max_action_dim();
        let mut noise = Vec::with_capacity(b * per);
        for v in views {
            let mut rng = ChaCha8Rng::seed_from_u64(v.seed ^ (v.step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            noise.extend((0..per).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)));
        }
        let x0 = Tensor::new(&[b, c.h_a, c.max_action_dim()], noise);
        let input = PolicyInput {
            embodiment: &emb,
            state: &state,
            obs: &obs,
            instruction: &instr,
            motifs: motifs.as_ref(),
        };
        let x = model.generate_from(&input, &x0)?;
        let a_dim = c.action_dims[embodiment];
        Ok((0..b)
            .map(|i| {
                let mut out = Vec::with_capacity(c.h_a * a_dim);
                for k in 0..c.h_a {
                    let row = &x.data()[i * per + k * c.max_action_dim()..][..a_dim];
                    out.extend(norm.unnormalize_action(row));
                }
                Tensor::new(&[c.h_a, a_dim], out)
            })
            .collect())
    }
}

/// Replays recorded demonstrations open loop, indexed by rollout seed.
pub struct ExpertReplay<'a> {
    pub episodes: Vec<(u64, &'a Episode)>,
    pub horizon: usize,
}

impl ChunkPolicy for ExpertReplay<'_> {
    fn act(&self, _: usize, _: usize, views: &[WorldView]) -> Result<Vec<Tensor>> {
        views
            .iter()
            .map(|v| {
                let (_, ep) = self
                    .episodes
                    .iter()
                    .find(|(s, _)| *s == v.seed)
                    .ok_or_else(|| MotifError::Domain(format!("no recorded episode for seed {}", v.seed)))?;
                let (t, d) = (ep.len(), ep.actions.shape()[1]);
                let mut out = Vec::with_capacity(self.horizon * d);
                for k in 0..self.horizon {
                    out.extend_from_slice(ep.actions.row((v.step + k).min(t - 1)));
                }
                Ok(Tensor::new(&[self.horizon, d], out))
            })
            .collect()
    }
}

/// Outputs all-zero actions.
pub struct ZeroPolicy {
    pub horizon: usize,
    pub action_dim: usize,
}

impl ChunkPolicy for ZeroPolicy {
    fn act(&self, _: usize, _: usize, views: &[WorldView]) -> Result<Vec<Tensor>> {
        Ok(views
            .iter()
            .map(|_| Tensor::zeros(&[self.horizon, self.action_dim]))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    /// End-effector states, starting with the initial one.
    pub states: Vec<[f64; 4]>,
    pub objects: Vec<[f64; 2]>,
}

/// Initial scene of an evaluation rollout. Evaluation seeds live in their
/// own stream so they never coincide with a demonstration seed.
pub fn rollout_scene(config: &BenchmarkConfig, e: usize, t: usize, seed: u64) -> Result<Scene> {
    let task = config
        .tasks
        .get(t)
        .ok_or_else(|| MotifError::Domain(format!("unknown task {t}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed ^ 0xE7A1_5EED, e, t, 0));
    task.sample_scene(&mut rng)
}

/// Runs one world per `(scene, seed)` in lockstep, batching the policy
/// over the worlds that are still going.
pub fn rollout_scenes(
    policy: &dyn ChunkPolicy,
    config: &BenchmarkConfig,
    e: usize,
    t: usize,
    scenes: &[(Scene, u64)],
    rc: &RolloutConfig,
) -> Result<Vec<RolloutRecord>> {
    let emb = config
        .embodiments
        .get(e)
        .ok_or_else(|| MotifError::Domain(format!("unknown embodiment {e}")))?;
    let task = config
        .tasks
        .get(t)
        .ok_or_else(|| MotifError::Domain(format!("unknown task {t}")))?;
    if rc.execute == 0 {
        return Err(MotifError::Config("execute at least one action per chunk".into()));
    }
    let horizon = (episode_len(config.synthesis.base_len, emb) as f64 * rc.horizon_factor).ceil() as usize;
    let mut worlds: Vec<World> = scenes.iter().map(|(s, _)| World::new(emb, task, *s)).collect();
    let mut records: Vec<RolloutRecord> = scenes
        .iter()
        .zip(&worlds)
        .map(|((_, seed), w)| RolloutRecord {
            seed: *seed,
            success: w.success(),
            steps: 0,
            states: vec![w.state()],
            objects: vec![w.object()],
        })
        .collect();
    let mut step = 0;
    while step < horizon {
        let active: Vec<usize> = (0..worlds.len()).filter(|&i| !records[i].success).collect();
        if active.is_empty() {
            break;
        }
        let views: Vec<WorldView> = active
            .iter()
            .map(|&i| WorldView {
                state: worlds[i].state(),
                obs: worlds[i].observation(),
                seed: records[i].seed,
                step,
            })
            .collect();
        let chunks = policy.act(e, task.instruction, &views)?;
        if chunks.len() != active.len() {
            return Err(MotifError::Shape(format!(
                "{} chunks for {} worlds",
                chunks.len(),
                active.len()
            )));
        }
        let n = rc.execute.min(horizon - step);
        for (&i, chunk) in active.iter().zip(&chunks) {
            if chunk.rank() != 2 || chunk.shape()[1] != emb.action_dim || chunk.shape()[0] < n {
                return Err(MotifError::Shape(format!(
                    "chunk {:?} for a {}-dim embodiment executing {n} steps",
                    chunk.shape(),
                    emb.action_dim
                )));
            }
            let (w, r) = (&mut worlds[i], &mut records[i]);
            for k in 0..n {
                w.step(chunk.row(k));
                r.steps += 1;
                r.states.push(w.state());
                r.objects.push(w.object());
                if w.success() {
                    r.success = true;
                    break;
                }
            }
        }
        step += n;
    }
    Ok(records)
}

/// One evaluation rollout on the scene drawn from `seed`.
pub fn rollout(
    policy: &dyn ChunkPolicy,
    config: &BenchmarkConfig,
    e: usize,
    t: usize,
    seed: u64,
    rc: &RolloutConfig,
) -> Result<RolloutRecord> {
    let scene = rollout_scene(config, e, t, seed)?;
    Ok(rollout_scenes(policy, config, e, t, &[(scene, seed)], rc)?.remove(0))
}

/// `n` rollouts of one pair with seeds `seed, seed + 1, …`.
pub fn rollout_pair(
    policy: &dyn ChunkPolicy,
    config: &BenchmarkConfig,
    e: usize,
    t: usize,
    n: usize,
    seed: u64,
    rc: &RolloutConfig,
) -> Result<Vec<RolloutRecord>> {
    let scenes = (0..n as u64)
        .map(|r| Ok((rollout_scene(config, e, t, seed + r)?, seed + r)))
        .collect::<Result<Vec<_>>>()?;
    rollout_scenes(policy, config, e, t, &scenes, rc)
}
