//! Synthetic multi-embodiment demonstration corpus.
//!
//! Each embodiment is a planar arm with its own base pose, reach, speed and
//! action space. Tasks share their semantics across embodiments: a unit-scale
//! reference path is mapped through the embodiment's base pose, reach and
//! time warp, then perturbed by smooth bounded noise.

mod corpus;
mod split;
mod world;

use std::f64::consts::PI;

use motif_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use corpus::{episode_seed, generate_corpus, read_corpus, write_corpus, BenchmarkConfig, Corpus};
pub use split::{
    allocate_interleaved, Access, AccessLog, BenchmarkSplit, Layout, PairSplit, Role, TrainingSet,
};
pub use world::{encode_action, Scene, World, GRID, OBS_DIM, POS_GAIN, ROT_GAIN, STATE_DIM};

use crate::error::{MotifError, Result};
use crate::geom::Pose2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentSpec {
    pub id: String,
    pub base_pose: Pose2,
    pub workspace_radius: f64,
    pub speed_scale: f64,
    pub action_dim: usize,
    /// Seed of the action-space mixing matrix.
    pub mix_seed: u64,
}

impl EmbodimentSpec {
    pub fn new(
        id: &str,
        base_pose: Pose2,
        workspace_radius: f64,
        speed_scale: f64,
        action_dim: usize,
        mix_seed: u64,
    ) -> Self {
        Self {
            id: id.to_string(),
            base_pose,
            workspace_radius,
            speed_scale,
            action_dim,
            mix_seed,
        }
    }

    pub fn state_dim(&self) -> usize {
        STATE_DIM
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.workspace_radius > 0.0) {
            return Err(MotifError::Config(format!(
                "embodiment {}: workspace_radius must be positive",
                self.id
            )));
        }
        if !(self.speed_scale > 0.0) {
            return Err(MotifError::Config(format!(
                "embodiment {}: speed_scale must be positive",
                self.id
            )));
        }
        if self.action_dim < STATE_DIM {
            return Err(MotifError::Config(format!(
                "embodiment {}: action_dim {} below the {STATE_DIM} controlled quantities",
                self.id, self.action_dim
            )));
        }
        Ok(())
    }

    /// Row-major `action_dim × 4` matrix from low-level controls
    /// (base-frame Δx, Δy, Δθ, gripper) to this embodiment's actions.
    /// Columns are orthogonal with scales in [0.5, 2], so it has full
    /// column rank.
    pub fn action_map(&self) -> Vec<f64> {
        let d = self.action_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.mix_seed);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(4);
        while cols.len() < 4 {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                cols.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let scales: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut m = vec![0.0; d * 4];
        for i in 0..d {
            for j in 0..4 {
                m[i * 4 + j] = cols[j][i] * scales[j];
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    /// Carry the object straight to marker A.
    PlaceAtA,
    /// Carry the object to marker B along an arc.
    PlaceAtB,
    /// Drag the object back to the start position.
    PullHome,
    /// Carry the object to the midpoint of the markers while turning.
    MidpointRotate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub kind: ProfileKind,
    /// Sideways bulge of an arc, as a fraction of the transport distance.
    pub arc_bulge: f64,
    /// Heading change during transport, radians.
    pub turn: f64,
}

/// Distribution of scene layouts, in unit-workspace base-frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub start: [f64; 2],
    pub start_jitter: f64,
    pub heading_range: f64,
    pub object_distance: [f64; 2],
    pub marker_radius: [f64; 2],
    pub marker_a_angle: [f64; 2],
    pub marker_b_angle: [f64; 2],
    /// Minimum distance between the object and the task goal.
    pub min_travel: f64,
}

impl Default for SceneLayout {
    fn default() -> Self {
        Self {
            start: [0.35, 0.0],
            start_jitter: 0.05,
            heading_range: 0.5,
            object_distance: [0.15, 0.3],
            marker_radius: [0.35, 0.8],
            marker_a_angle: [0.3, 1.3],
            marker_b_angle: [-1.3, -0.3],
            min_travel: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub instruction: usize,
    pub text: String,
    pub profile: Profile,
    pub layout: SceneLayout,
    /// Target radius ε in workspace units.
    pub success_radius: f64,
    /// Distance within which a closing gripper grabs the object.
    pub capture_radius: f64,
}

impl TaskSpec {
    pub fn new(id: &str, instruction: usize, text: &str, kind: ProfileKind) -> Self {
        Self {
            id: id.to_string(),
            instruction,
            text: text.to_string(),
            profile: Profile {
                kind,
                arc_bulge: 0.35,
                turn: PI / 3.0,
            },
            layout: SceneLayout::default(),
            success_radius: 0.08,
            capture_radius: 0.05,
        }
    }

    /// Draws a scene whose goal is at least `min_travel` from the object.
    pub fn sample_scene(&self, rng: &mut ChaCha8Rng) -> Result<Scene> {
        let l = &self.layout;
        let range = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
            if r[1] > r[0] {
                rng.random_range(r[0]..r[1])
            } else {
                r[0]
            }
        };
        let polar = |r: f64, a: f64| [r * a.cos(), r * a.sin()];
        for _ in 0..1000 {
            let j = l.start_jitter;
            let sx = l.start[0] + if j > 0.0 { rng.random_range(-j..j) } else { 0.0 };
            let sy = l.start[1] + if j > 0.0 { rng.random_range(-j..j) } else { 0.0 };
            let h = l.heading_range;
            let theta = if h > 0.0 { rng.random_range(-h..h) } else { 0.0 };
            let od = range(rng, l.object_distance);
            let oa = rng.random_range(-PI..PI);
            let object = [sx + od * oa.cos(), sy + od * oa.sin()];
            let marker_a = polar(range(rng, l.marker_radius), range(rng, l.marker_a_angle));
            let marker_b = polar(range(rng, l.marker_radius), range(rng, l.marker_b_angle));
            let scene = Scene {
                start: Pose2::new(sx, sy, theta),
                object,
                marker_a,
                marker_b,
            };
            let goal = scene.goal(self.profile.kind);
            if crate::geom::dist(goal, object) >= l.min_travel && norm(object) < 0.95 {
                return Ok(scene);
            }
        }
        Err(MotifError::Config(format!(
            "task {}: scene layout never yields a valid scene",
            self.id
        )))
    }
}

fn norm(p: [f64; 2]) -> f64 {
    p[0].hypot(p[1])
}

// Phase boundaries of every profile, as fractions of the episode.
const REACH_END: f64 = 0.3;
const GRASP_END: f64 = 0.38;
const CARRY_END: f64 = 0.85;
const RELEASE_END: f64 = 0.93;

fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

fn phase(u: f64, a: f64, b: f64) -> f64 {
    min_jerk((u - a) / (b - a))
}

fn lerp(a: [f64; 2], b: [f64; 2], s: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s]
}

/// Unit-scale reference state at normalized time `u ∈ [0, 1]`, in the
/// embodiment's base frame: position, heading, gripper openness.
pub fn canonical_profile(task: &TaskSpec, scene: &Scene, u: f64) -> [f64; 4] {
    let start = [scene.start.x, scene.start.y];
    let goal = scene.goal(task.profile.kind);
    let obj = scene.object;
    let theta0 = scene.start.theta;
    if u < REACH_END {
        let p = lerp(start, obj, phase(u, 0.0, REACH_END));
        return [p[0], p[1], theta0, 1.0];
    }
    if u < GRASP_END {
        return [obj[0], obj[1], theta0, 1.0 - phase(u, REACH_END, GRASP_END)];
    }
    let turn = match task.profile.kind {
        ProfileKind::MidpointRotate => task.profile.turn,
        _ => 0.0,
    };
    if u < CARRY_END {
        let s = phase(u, GRASP_END, CARRY_END);
        let p = match task.profile.kind {
            ProfileKind::PlaceAtB => {
                let mid = lerp(obj, goal, 0.5);
                let d = [goal[0] - obj[0], goal[1] - obj[1]];
                let b = task.profile.arc_bulge;
                let ctrl = [mid[0] - b * d[1], mid[1] + b * d[0]];
                let a = lerp(obj, ctrl, s);
                let c = lerp(ctrl, goal, s);
                lerp(a, c, s)
            }
            _ => lerp(obj, goal, s),
        };
        return [p[0], p[1], theta0 + turn * s, 0.0];
    }
    let g = if u < RELEASE_END {
        phase(u, CARRY_END, RELEASE_END)
    } else {
        1.0
    };
    [goal[0], goal[1], theta0 + turn, g]
}

/// Episode length for an embodiment: the base length divided by its speed.
pub fn episode_len(base_len: usize, emb: &EmbodimentSpec) -> usize {
    ((base_len as f64 / emb.speed_scale).round() as usize).max(2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisParams {
    /// Episode length at speed scale 1.
    pub base_len: usize,
    /// Noise amplitude as a fraction of the workspace radius.
    pub noise: f64,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        Self {
            base_len: 96,
            noise: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub embodiment_id: String,
    pub task_id: String,
    pub instruction: usize,
    pub seed: u64,
    pub scene: Scene,
    /// `[T, 4]` absolute end-effector states.
    pub states: Tensor,
    /// `[T, action_dim]`; action `t` moves state `t` to `t + 1`.
    pub actions: Tensor,
    /// `[T, OBS_DIM]`.
    pub observations: Tensor,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, t: usize) -> [f64; 4] {
        self.states.row(t).try_into().unwrap()
    }
}

/// Smooth noise: three sinusoids per axis, tapered to zero at both ends.
fn smooth_noise(rng: &mut ChaCha8Rng, amplitude: f64) -> impl Fn(f64) -> [f64; 2] {
    let mut terms = [[0.0; 3]; 6];
    for t in terms.iter_mut() {
        *t = [
            amplitude / 3.0 * rng.random::<f64>(),
            rng.random_range(0.5..3.0),
            rng.random_range(0.0..2.0 * PI),
        ];
    }
    move |u: f64| {
        let taper = (PI * u).sin();
        let axis = |k: usize| -> f64 {
            terms[3 * k..3 * k + 3]
                .iter()
                .map(|[a, f, ph]| a * (2.0 * PI * f * u + ph).sin())
                .sum::<f64>()
                * taper
        };
        [axis(0), axis(1)]
    }
}

/// One expert demonstration, deterministic in `(emb, task, seed, params)`.
pub fn synthesize_episode(
    emb: &EmbodimentSpec,
    task: &TaskSpec,
    seed: u64,
    params: &SynthesisParams,
) -> Result<Episode> {
    emb.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = task.sample_scene(&mut rng)?;
    let noise = smooth_noise(&mut rng, params.noise);
    let t_ep = episode_len(params.base_len, emb);
    let r = emb.workspace_radius;

    let mut states = Vec::with_capacity(t_ep * STATE_DIM);
    for t in 0..t_ep {
        let u = t as f64 / (t_ep - 1) as f64;
        let [x, y, th, g] = canonical_profile(task, &scene, u);
        if norm([x, y]) > 1.0 {
            return Err(MotifError::Config(format!(
                "task {} leaves the workspace of {} (|p| = {:.3})",
                task.id,
                emb.id,
                norm([x, y])
            )));
        }
        let [nx, ny] = noise(u);
        let local = [x + nx, y + ny];
        if norm(local) > 1.0 {
            return Err(MotifError::Config(format!(
                "task {}: noisy path leaves the workspace of {}",
                task.id, emb.id
            )));
        }
        let p = emb.base_pose.apply([local[0] * r, local[1] * r]);
        states.extend_from_slice(&[p[0], p[1], emb.base_pose.theta + th, g]);
    }

    let map = emb.action_map();
    let mut world = World::new(emb, task, scene);
    let mut actions = Vec::with_capacity(t_ep * emb.action_dim);
    let mut observations = Vec::with_capacity(t_ep * OBS_DIM);
    for t in 0..t_ep {
        let s: [f64; 4] = states[t * 4..t * 4 + 4].try_into().unwrap();
        world.set_state(s);
        observations.extend(world.observation());
        let next = if t + 1 < t_ep {
            states[(t + 1) * 4..(t + 2) * 4].try_into().unwrap()
        } else {
            s
        };
        actions.extend(encode_action(emb, &map, s, next));
    }
    if !world.success() {
        return Err(MotifError::Config(format!(
            "task {} on {} (seed {seed}) does not end in success",
            task.id, emb.id
        )));
    }
    Ok(Episode {
        embodiment_id: emb.id.clone(),
        task_id: task.id.clone(),
        instruction: task.instruction,
        seed,
        scene,
        states: Tensor::new(&[t_ep, STATE_DIM], states),
        actions: Tensor::new(&[t_ep, emb.action_dim], actions),
        observations: Tensor::new(&[t_ep, OBS_DIM], observations),
    })
}

/// A fixed window of absolute end-effector states.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySegment {
    /// `[H_s, 4]`.
    pub states: Tensor,
    pub start: usize,
    pub progress: f64,
    pub instruction: usize,
    pub embodiment_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Segments {
    pub items: Vec<TrajectorySegment>,
    pub warnings: Vec<String>,
}

/// Window start progress `start / (T_ep − H_s)`, 0 when the episode is
/// exactly one window long.
pub fn window_progress(start: usize, t_ep: usize, h_s: usize) -> f64 {
    let denom = t_ep.saturating_sub(h_s);
    if denom == 0 {
        0.0
    } else {
        (start as f64 / denom as f64).clamp(0.0, 1.0)
    }
}

/// Windows of length `h_s` starting at `0, stride, 2·stride, …`.
pub fn segment_episode(ep: &Episode, h_s: usize, stride: usize) -> Result<Segments> {
    if stride == 0 || h_s == 0 {
        return Err(MotifError::Domain(
            "segment length and stride must be positive".into(),
        ));
    }
    let t_ep = ep.len();
    let mut out = Segments::default();
    if t_ep < h_s {
        let msg = format!(
            "episode {}/{} seed {} has {t_ep} steps, shorter than the window {h_s}",
            ep.embodiment_id, ep.task_id, ep.seed
        );
        log::warn!("{msg}");
        out.warnings.push(msg);
        return Ok(out);
    }
    for start in (0..=t_ep - h_s).step_by(stride) {
        let data = ep.states.data()[start * STATE_DIM..(start + h_s) * STATE_DIM].to_vec();
        out.items.push(TrajectorySegment {
            states: Tensor::new(&[h_s, STATE_DIM], data),
            start,
            progress: window_progress(start, t_ep, h_s),
            instruction: ep.instruction,
            embodiment_id: ep.embodiment_id.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn place_a() -> TaskSpec {
        TaskSpec::new("place_a", 0, "place the block on marker A", ProfileKind::PlaceAtA)
    }

    #[test]
    fn noise_free_identity_embodiment_reproduces_profile() {
        let emb = EmbodimentSpec::new("unit", Pose2::IDENTITY, 1.0, 1.0, 4, 1);
        let params = SynthesisParams {
            base_len: 96,
            noise: 0.0,
        };
        for kind in [
            ProfileKind::PlaceAtA,
            ProfileKind::PlaceAtB,
            ProfileKind::PullHome,
            ProfileKind::MidpointRotate,
        ] {
            let task = TaskSpec::new("t", 0, "", kind);
            let ep = synthesize_episode(&emb, &task, 5, &params).unwrap();
            for t in 0..ep.len() {
                let u = t as f64 / (ep.len() - 1) as f64;
                assert_eq!(ep.state(t), canonical_profile(&task, &ep.scene, u));
            }
        }
    }

    #[test]
    fn windows_over_96_steps() {
        let emb = EmbodimentSpec::new("unit", Pose2::IDENTITY, 1.0, 1.0, 4, 1);
        let ep = synthesize_episode(&emb, &place_a(), 1, &SynthesisParams::default()).unwrap();
        assert_eq!(ep.len(), 96);
        let segs = segment_episode(&ep, 32, 32).unwrap();
        let p: Vec<f64> = segs.items.iter().map(|s| s.progress).collect();
        assert_eq!(p, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn single_window_has_zero_progress() {
        let emb = EmbodimentSpec::new("unit", Pose2::IDENTITY, 1.0, 1.0, 4, 1);
        let params = SynthesisParams {
            base_len: 32,
            noise: 0.02,
        };
        let ep = synthesize_episode(&emb, &place_a(), 1, &params).unwrap();
        for stride in [1, 7, 100] {
            let segs = segment_episode(&ep, 32, stride).unwrap();
            assert_eq!(segs.items.len(), 1);
            assert_eq!(segs.items[0].progress, 0.0);
        }
        let short = segment_episode(&ep, 40, 4).unwrap();
        assert!(short.items.is_empty());
        assert_eq!(short.warnings.len(), 1);
    }

    #[test]
    fn oversized_layout_is_rejected() {
        let emb = EmbodimentSpec::new("unit", Pose2::IDENTITY, 1.0, 1.0, 4, 1);
        let mut task = place_a();
        task.layout.marker_radius = [1.3, 1.5];
        let err = synthesize_episode(&emb, &task, 3, &SynthesisParams::default()).unwrap_err();
        assert!(matches!(err, MotifError::Config(_)), "{err}");
    }

    #[test]
    fn action_dims_follow_embodiment() {
        let emb = EmbodimentSpec::new("six", Pose2::new(1.0, 2.0, 0.4), 0.7, 1.25, 6, 9);
        let ep = synthesize_episode(&emb, &place_a(), 4, &SynthesisParams::default()).unwrap();
        assert_eq!(ep.actions.shape(), &[77, 6]);
        assert_eq!(ep.observations.shape(), &[77, OBS_DIM]);
    }
}
