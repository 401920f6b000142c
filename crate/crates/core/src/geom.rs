//! Planar rigid transforms.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// A pose in SE(2): translation plus heading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    /// Maps a point from this frame into the parent frame.
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let [dx, dy] = rotate(p, self.theta);
        [self.x + dx, self.y + dy]
    }

    /// Maps a parent-frame point into this frame.
    pub fn apply_inverse(&self, p: [f64; 2]) -> [f64; 2] {
        rotate([p[0] - self.x, p[1] - self.y], -self.theta)
    }

    /// `self ∘ other`: `other` expressed in the parent of `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let [x, y] = self.apply([other.x, other.y]);
        Pose2::new(x, y, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Pose2 {
        let [x, y] = rotate([-self.x, -self.y], -self.theta);
        Pose2::new(x, y, -self.theta)
    }
}

pub fn rotate(p: [f64; 2], theta: f64) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}
