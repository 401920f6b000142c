//! Planar manipulation scene shared by demonstration synthesis and rollouts.

use serde::{Deserialize, Serialize};

use super::{EmbodimentSpec, ProfileKind, TaskSpec};
use crate::geom::{dist, rotate, Pose2};

/// End-effector state: x, y, heading, gripper openness.
pub const STATE_DIM: usize = 4;
pub const GRID: usize = 8;
/// Relative object/marker/home positions, gripper, attached flag, grid.
pub const OBS_DIM: usize = 10 + GRID * GRID;

/// Per-step displacement (unit workspace) that maps to an action value of 1.
pub const POS_GAIN: f64 = 0.02;
/// Per-step rotation (radians) that maps to an action value of 1.
pub const ROT_GAIN: f64 = 0.02;

/// Scene layout of one episode, in the embodiment's base frame with lengths
/// divided by its workspace radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub start: Pose2,
    pub object: [f64; 2],
    pub marker_a: [f64; 2],
    pub marker_b: [f64; 2],
}

impl Scene {
    pub fn goal(&self, kind: ProfileKind) -> [f64; 2] {
        match kind {
            ProfileKind::PlaceAtA => self.marker_a,
            ProfileKind::PlaceAtB => self.marker_b,
            ProfileKind::PullHome => [self.start.x, self.start.y],
            ProfileKind::MidpointRotate => [
                0.5 * (self.marker_a[0] + self.marker_b[0]),
                0.5 * (self.marker_a[1] + self.marker_b[1]),
            ],
        }
    }
}

/// Closed-loop world for one embodiment and task.
#[derive(Clone, Debug)]
pub struct World {
    emb: EmbodimentSpec,
    kind: ProfileKind,
    success_radius: f64,
    capture_radius: f64,
    scene: Scene,
    decode: Vec<f64>,
    ee: Pose2,
    grip: f64,
    object: [f64; 2],
    held: Option<[f64; 2]>,
}

impl World {
    pub fn new(emb: &EmbodimentSpec, task: &TaskSpec, scene: Scene) -> Self {
        let start = emb.base_pose.compose(&scale_pose(scene.start, emb.workspace_radius));
        let mut w = Self {
            emb: emb.clone(),
            kind: task.profile.kind,
            success_radius: task.success_radius,
            capture_radius: task.capture_radius,
            scene,
            decode: pseudo_inverse(&emb.action_map(), emb.action_dim),
            ee: start,
            grip: 1.0,
            object: [0.0; 2],
            held: None,
        };
        w.object = w.to_world(scene.object);
        w
    }

    fn to_world(&self, unit: [f64; 2]) -> [f64; 2] {
        let r = self.emb.workspace_radius;
        self.emb.base_pose.apply([unit[0] * r, unit[1] * r])
    }

    fn to_unit(&self, world: [f64; 2]) -> [f64; 2] {
        let p = self.emb.base_pose.apply_inverse(world);
        let r = self.emb.workspace_radius;
        [p[0] / r, p[1] / r]
    }

    pub fn state(&self) -> [f64; 4] {
        [self.ee.x, self.ee.y, self.ee.theta, self.grip]
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn object(&self) -> [f64; 2] {
        self.object
    }

    pub fn holding(&self) -> bool {
        self.held.is_some()
    }

    pub fn goal(&self) -> [f64; 2] {
        self.to_world(self.scene.goal(self.kind))
    }

    /// Moves the end-effector to `s` and updates the object: a held object
    /// follows rigidly, an open gripper releases it, and a closing gripper
    /// within the capture radius grabs it.
    pub fn set_state(&mut self, s: [f64; 4]) {
        self.ee = Pose2::new(s[0], s[1], s[2]);
        self.grip = s[3];
        if let Some(offset) = self.held {
            self.object = self.ee.apply(offset);
        }
        if self.grip >= 0.5 {
            self.held = None;
        } else if self.held.is_none()
            && dist(self.object, [self.ee.x, self.ee.y])
                <= self.capture_radius * self.emb.workspace_radius
        {
            self.held = Some(self.ee.apply_inverse(self.object));
        }
    }

    /// Next state commanded by an action in this embodiment's action space.
    pub fn decode_action(&self, action: &[f64]) -> [f64; 4] {
        let d = self.emb.action_dim;
        assert_eq!(action.len(), d, "action dimension mismatch");
        let mut u = [0.0; 4];
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = (0..d).map(|j| self.decode[i * d + j] * action[j]).sum();
        }
        let r = self.emb.workspace_radius;
        let dp = rotate(
            [u[0] * POS_GAIN * r, u[1] * POS_GAIN * r],
            self.emb.base_pose.theta,
        );
        [
            self.ee.x + dp[0],
            self.ee.y + dp[1],
            self.ee.theta + u[2] * ROT_GAIN,
            u[3].clamp(0.0, 1.0),
        ]
    }

    pub fn step(&mut self, action: &[f64]) {
        let next = self.decode_action(action);
        self.set_state(next);
    }

    /// Scene features in the end-effector frame, lengths in workspace units.
    pub fn observation(&self) -> Vec<f64> {
        let r = self.emb.workspace_radius;
        let rel = |p: [f64; 2]| {
            let q = self.ee.apply_inverse(p);
            [q[0] / r, q[1] / r]
        };
        let items = [
            (rel(self.object), 1.0),
            (rel(self.to_world(self.scene.marker_a)), 0.5),
            (rel(self.to_world(self.scene.marker_b)), 0.5),
            (rel(self.to_world([self.scene.start.x, self.scene.start.y])), 0.25),
        ];
        let mut obs = Vec::with_capacity(OBS_DIM);
        for (p, _) in &items {
            obs.extend_from_slice(p);
        }
        obs.push(self.grip);
        obs.push(if self.held.is_some() { 1.0 } else { 0.0 });
        let mut grid = [0.0; GRID * GRID];
        for (p, v) in &items {
            let cx = ((p[0] + 1.0) * 0.5 * GRID as f64).floor();
            let cy = ((p[1] + 1.0) * 0.5 * GRID as f64).floor();
            if (0.0..GRID as f64).contains(&cx) && (0.0..GRID as f64).contains(&cy) {
                let cell = &mut grid[cy as usize * GRID + cx as usize];
                *cell = f64::max(*cell, *v);
            }
        }
        obs.extend_from_slice(&grid);
        obs
    }

    /// Object inside the target radius with the gripper open.
    pub fn success(&self) -> bool {
        let d = dist(self.to_unit(self.object), self.scene.goal(self.kind));
        d <= self.success_radius && self.grip >= 0.5 && self.held.is_none()
    }
}

pub(crate) fn scale_pose(p: Pose2, r: f64) -> Pose2 {
    Pose2::new(p.x * r, p.y * r, p.theta)
}

/// Encodes the transition `s -> next` as an action for `emb`.
pub fn encode_action(emb: &EmbodimentSpec, map: &[f64], s: [f64; 4], next: [f64; 4]) -> Vec<f64> {
    let r = emb.workspace_radius;
    let dp = rotate([next[0] - s[0], next[1] - s[1]], -emb.base_pose.theta);
    let u = [
        dp[0] / (POS_GAIN * r),
        dp[1] / (POS_GAIN * r),
        (next[2] - s[2]) / ROT_GAIN,
        next[3],
    ];
    (0..emb.action_dim)
        .map(|i| (0..4).map(|j| map[i * 4 + j] * u[j]).sum())
        .collect()
}

/// `(MᵀM)⁻¹Mᵀ` for a full-column-rank `rows × 4` matrix, as `4 × rows`.
fn pseudo_inverse(m: &[f64], rows: usize) -> Vec<f64> {
    let mut gram = [[0.0; 4]; 4];
    for (i, gi) in gram.iter_mut().enumerate() {
        for (j, gij) in gi.iter_mut().enumerate() {
            *gij = (0..rows).map(|k| m[k * 4 + i] * m[k * 4 + j]).sum();
        }
    }
    let inv = invert4(gram);
    let mut out = vec![0.0; 4 * rows];
    for i in 0..4 {
        for k in 0..rows {
            out[i * rows + k] = (0..4).map(|j| inv[i][j] * m[k * 4 + j]).sum();
        }
    }
    out
}

fn invert4(a: [[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut aug = [[0.0; 8]; 4];
    for i in 0..4 {
        aug[i][..4].copy_from_slice(&a[i]);
        aug[i][4 + i] = 1.0;
    }
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, piv);
        let d = aug[col][col];
        assert!(d.abs() > 1e-12, "singular action map");
        for v in aug[col].iter_mut() {
            *v /= d;
        }
        for r in 0..4 {
            if r != col {
                let f = aug[r][col];
                for c in 0..8 {
                    aug[r][c] -= f * aug[col][c];
                }
            }
        }
    }
    let mut inv = [[0.0; 4]; 4];
    for i in 0..4 {
        inv[i].copy_from_slice(&aug[i][4..]);
    }
    inv
}
