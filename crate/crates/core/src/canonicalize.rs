//! Rigid re-anchoring of state windows at their first end-effector pose,
//! with positions scaled by the embodiment's reach.

use motif_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::data_synth::{EmbodimentSpec, TrajectorySegment, STATE_DIM};
use crate::error::{MotifError, Result};
use crate::geom::{rotate, wrap_angle, Pose2};

#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalSegment {
    /// `[H_s, 4]`: anchored position / radius, relative heading, gripper.
    pub values: Tensor,
    pub progress: f64,
    pub instruction: usize,
    pub embodiment_id: String,
}

/// First pose of a window, the anchor of its canonical frame.
pub fn anchor_of(states: &Tensor) -> Pose2 {
    let s = states.row(0);
    Pose2::new(s[0], s[1], s[2])
}

/// Canonical values of a `[T, 4]` state window.
pub fn canonicalize_states(states: &Tensor, radius: f64) -> Result<Tensor> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(MotifError::Domain(format!(
            "workspace radius must be positive, got {radius}"
        )));
    }
    if states.rank() != 2 || states.shape()[1] != STATE_DIM || states.shape()[0] == 0 {
        return Err(MotifError::Shape(format!(
            "expected [T, {STATE_DIM}] states, got {:?}",
            states.shape()
        )));
    }
    let anchor = anchor_of(states);
    let t = states.shape()[0];
    let mut out = Vec::with_capacity(t * STATE_DIM);
    for i in 0..t {
        let s = states.row(i);
        let [x, y] = rotate([s[0] - anchor.x, s[1] - anchor.y], -anchor.theta);
        out.extend_from_slice(&[
            x / radius,
            y / radius,
            wrap_angle(s[2] - anchor.theta),
            s[3],
        ]);
    }
    Ok(Tensor::new(&[t, STATE_DIM], out))
}

pub fn canonicalize_segment(
    seg: &TrajectorySegment,
    emb: &EmbodimentSpec,
) -> Result<CanonicalSegment> {
    Ok(CanonicalSegment {
        values: canonicalize_states(&seg.states, emb.workspace_radius)?,
        progress: seg.progress,
        instruction: seg.instruction,
        embodiment_id: seg.embodiment_id.clone(),
    })
}

/// Maps canonical values back to absolute states around `anchor`.
/// Headings come back as `anchor.theta + relative`, i.e. modulo 2π.
pub fn decanonicalize_segment(
    cseg: &CanonicalSegment,
    anchor: Pose2,
    emb: &EmbodimentSpec,
) -> Tensor {
    let r = emb.workspace_radius;
    let v = &cseg.values;
    let t = v.shape()[0];
    let mut out = Vec::with_capacity(t * STATE_DIM);
    for i in 0..t {
        let c = v.row(i);
        let [x, y] = anchor.apply([c[0] * r, c[1] * r]);
        out.extend_from_slice(&[x, y, anchor.theta + c[2], c[3]]);
    }
    Tensor::new(&[t, STATE_DIM], out)
}

/// How Stage I sees a state window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SegmentTransform {
    Canonical,
    /// Absolute states standardized by global per-dimension statistics.
    Standardized { mean: [f64; 4], std: [f64; 4] },
}

impl SegmentTransform {
    /// Per-dimension statistics over every row of `windows`.
    pub fn standardized_from(windows: &[&Tensor]) -> Self {
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        let mut n = 0.0;
        for w in windows {
            for row in w.data().chunks(STATE_DIM) {
                for d in 0..4 {
                    sum[d] += row[d];
                    sq[d] += row[d] * row[d];
                }
                n += 1.0;
            }
        }
        let mut mean = [0.0; 4];
        let mut std = [1.0; 4];
        if n > 0.0 {
            for d in 0..4 {
                mean[d] = sum[d] / n;
                std[d] = (sq[d] / n - mean[d] * mean[d]).max(0.0).sqrt().max(1e-6);
            }
        }
        Self::Standardized { mean, std }
    }

    pub fn apply(&self, states: &Tensor, emb: &EmbodimentSpec) -> Result<Tensor> {
        match self {
            Self::Canonical => canonicalize_states(states, emb.workspace_radius),
            Self::Standardized { mean, std } => Ok(Tensor::from_fn(states.shape(), |i| {
                let d = i % STATE_DIM;
                (states.data()[i] - mean[d]) / std[d]
            })),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(states: Vec<f64>) -> TrajectorySegment {
        let t = states.len() / 4;
        TrajectorySegment {
            states: Tensor::new(&[t, 4], states),
            start: 0,
            progress: 0.25,
            instruction: 1,
            embodiment_id: "e".into(),
        }
    }

    fn emb(r: f64) -> EmbodimentSpec {
        EmbodimentSpec::new("e", Pose2::IDENTITY, r, 1.0, 4, 0)
    }

    #[test]
    fn origin_anchor_is_identity() {
        let s = seg(vec![0.0, 0.0, 0.0, 1.0, 0.3, -0.2, 0.5, 0.4, -0.1, 0.7, -0.3, 0.0]);
        let c = canonicalize_segment(&s, &emb(1.0)).unwrap();
        assert_eq!(c.values, s.states);
        assert_eq!(c.progress, 0.25);
    }

    #[test]
    fn constant_segment_is_zero_motion() {
        let s = seg([1.5, -2.0, 2.5, 0.3].repeat(6));
        let c = canonicalize_segment(&s, &emb(0.8)).unwrap();
        for row in c.values.data().chunks(4) {
            assert_eq!(&row[..3], &[0.0, 0.0, 0.0]);
            assert_eq!(row[3], 0.3);
        }
    }

    #[test]
    fn zero_radius_is_a_domain_error() {
        let s = seg(vec![0.0; 8]);
        assert!(matches!(
            canonicalize_segment(&s, &emb(0.0)),
            Err(MotifError::Domain(_))
        ));
    }

    #[test]
    fn unit_step_scales_by_radius() {
        let c = CanonicalSegment {
            values: Tensor::new(&[2, 4], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]),
            progress: 0.0,
            instruction: 0,
            embodiment_id: "e".into(),
        };
        let anchor = Pose2::new(1.0, 1.0, std::f64::consts::FRAC_PI_2);
        let raw = decanonicalize_segment(&c, anchor, &emb(2.0));
        assert!((raw.row(1)[0] - 1.0).abs() < 1e-12);
        assert!((raw.row(1)[1] - 3.0).abs() < 1e-12);
        let zero = CanonicalSegment {
            values: Tensor::zeros(&[3, 4]),
            ..c
        };
        let raw = decanonicalize_segment(&zero, anchor, &emb(2.0));
        for row in raw.data().chunks(4) {
            assert_eq!(&row[..3], &[1.0, 1.0, std::f64::consts::FRAC_PI_2]);
        }
    }

    proptest! {
        #[test]
        fn relative_headings_stay_wrapped(th in proptest::collection::vec(-20.0f64..20.0, 2..10)) {
            let states: Vec<f64> = th.iter().flat_map(|&t| [0.1, 0.2, t, 0.5]).collect();
            let c = canonicalize_segment(&seg(states), &emb(1.0)).unwrap();
            for row in c.values.data().chunks(4) {
                prop_assert!(row[2] > -std::f64::consts::PI && row[2] <= std::f64::consts::PI);
            }
        }

        #[test]
        fn scale_covariance(c in 0.1f64..10.0, pts in proptest::collection::vec(-1.0f64..1.0, 12)) {
            let states: Vec<f64> = pts.chunks(3).flat_map(|p| [p[0], p[1], p[2], 0.5]).collect();
            let scaled: Vec<f64> = states
                .chunks(4)
                .flat_map(|r| [r[0] * c, r[1] * c, r[2], r[3]])
                .collect();
            let a = canonicalize_segment(&seg(states), &emb(1.0)).unwrap();
            let b = canonicalize_segment(&seg(scaled), &emb(c)).unwrap();
            for (x, y) in a.values.data().iter().zip(b.values.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
