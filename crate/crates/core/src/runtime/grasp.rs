//! Top-down grasp targets and the retarget gate.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geom::{pose_distance, rot_x, rot_z, wrap_angle, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspSpec {
    pregrasp_offset: f64,
    pub place_pose: Pose,
    /// `(m, rad)`.
    pub retarget_tol: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("pre-grasp offset must be positive and finite, got {0}")]
pub struct InvalidOffset(pub f64);

impl GraspSpec {
    pub fn new(pregrasp_offset: f64, place_pose: Pose, retarget_tol: (f64, f64)) -> Result<Self, InvalidOffset> {
        if !(pregrasp_offset > 0.0 && pregrasp_offset.is_finite()) {
            return Err(InvalidOffset(pregrasp_offset));
        }
        Ok(Self { pregrasp_offset, place_pose, retarget_tol })
    }

    pub fn pregrasp_offset(&self) -> f64 {
        self.pregrasp_offset
    }
}

/// Tool pose at `p` with its z axis pointing straight down, rotated by `yaw` about world z.
pub fn top_down(p: Vector3<f64>, yaw: f64) -> Pose {
    Pose::new(p, rot_z(yaw) * rot_x(PI))
}

/// `(pregrasp, grasp)`: the grasp frame of the object turned tool-down, and
/// the same pose lifted by the pre-grasp offset along world z.
pub fn derive_grasp_targets(object_pose: &Pose, grasp_offset: &Pose, spec: &GraspSpec) -> (Pose, Pose) {
    let frame = object_pose.compose(grasp_offset);
    let grasp = top_down(frame.p, frame.euler().yaw);
    let pregrasp = lifted(&grasp, spec.pregrasp_offset);
    (pregrasp, grasp)
}

pub fn lifted(pose: &Pose, dz: f64) -> Pose {
    Pose::new(pose.p + Vector3::new(0.0, 0.0, dz), pose.r)
}

/// A two-finger grasp is symmetric under a half turn about the tool axis;
/// picks the variant whose yaw is closer to `reference_yaw`.
pub fn nearest_symmetric(pose: &Pose, reference_yaw: f64) -> Pose {
    let yaw = heading(pose);
    let flipped = wrap_angle(yaw + PI);
    if wrap_angle(flipped - reference_yaw).abs() < wrap_angle(yaw - reference_yaw).abs() {
        Pose::new(pose.p, rot_z(PI) * pose.r)
    } else {
        *pose
    }
}

/// Heading of the tool x axis projected on the horizontal plane.
pub fn heading(pose: &Pose) -> f64 {
    let x = pose.r.column(0);
    x[1].atan2(x[0])
}

/// True iff the target moved strictly more than the tolerance in position or angle.
pub fn retarget_gate(old: &Pose, new: &Pose, tol: (f64, f64)) -> bool {
    let (dp, da) = pose_distance(old, new);
    dp > tol.0 || da > tol.1
}
