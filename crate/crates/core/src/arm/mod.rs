//! Serial manipulator description, kinematics and rigid-body dynamics.

mod dynamics;
mod ik;
mod kinematics;

pub use dynamics::{DynamicsTerms, FD_STEP};
pub use ik::{IkConfig, IkError, IkTarget};
pub use kinematics::Frames;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Pose;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("robot must have at least one joint")]
    NoJoints,
    #[error("joint {0}: mass must be positive")]
    NonPositiveMass(usize),
    #[error("joint {0}: inertia tensor must be symmetric positive semidefinite")]
    BadInertia(usize),
    #[error("joint {joint}: {what} lower limit must be below upper limit")]
    BadLimit { joint: usize, what: &'static str },
    #[error("link sphere references joint {0}, which does not exist")]
    BadSphere(usize),
    #[error("expected {expected} IK weights, got {got}")]
    BadWeights { expected: usize, got: usize },
    #[error("non-finite parameter in robot description")]
    NonFinite,
}

/// Per-joint bounds. Velocity, acceleration, jerk and torque bounds are symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub q_min: f64,
    pub q_max: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub j_max: f64,
    pub tau_max: f64,
}

/// One revolute joint in modified Denavit–Hartenberg form, plus the inertial
/// parameters of the link it drives (expressed in the joint frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    #[serde(default)]
    pub theta_offset: f64,
    pub mass: f64,
    pub com: [f64; 3],
    /// `[ixx, iyy, izz, ixy, ixz, iyz]` about the center of mass.
    pub inertia: [f64; 6],
    pub limits: JointLimits,
}

impl JointSpec {
    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        let [xx, yy, zz, xy, xz, yz] = self.inertia;
        Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }
}

/// Collision sphere rigidly attached to a link frame (`link` is a 0-based joint index).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSphere {
    pub link: usize,
    pub center: [f64; 3],
    pub radius: f64,
}

/// Raw robot section of the config file, validated into a [`RobotModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotDescription {
    pub joints: Vec<JointSpec>,
    #[serde(default)]
    pub tool: Pose,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    #[serde(default)]
    pub spheres: Vec<LinkSphere>,
    #[serde(default)]
    pub ik_weights: Option<Vec<f64>>,
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

/// Immutable, validated manipulator model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RobotDescription", into = "RobotDescription")]
pub struct RobotModel {
    joints: Vec<JointSpec>,
    tool: Pose,
    gravity: Vector3<f64>,
    spheres: Vec<LinkSphere>,
    ik_weights: Vec<f64>,
}

impl TryFrom<RobotDescription> for RobotModel {
    type Error = ModelError;

    fn try_from(desc: RobotDescription) -> Result<Self, ModelError> {
        RobotModel::new(desc)
    }
}

impl From<RobotModel> for RobotDescription {
    fn from(m: RobotModel) -> Self {
        RobotDescription {
            joints: m.joints,
            tool: m.tool,
            gravity: m.gravity.into(),
            spheres: m.spheres,
            ik_weights: Some(m.ik_weights),
        }
    }
}

impl RobotModel {
    pub fn new(desc: RobotDescription) -> Result<Self, ModelError> {
        let n = desc.joints.len();
        if n == 0 {
            return Err(ModelError::NoJoints);
        }
        for (i, j) in desc.joints.iter().enumerate() {
            let l = &j.limits;
            let finite = [j.a, j.alpha, j.d, j.theta_offset, j.mass]
                .iter()
                .chain(j.com.iter())
                .chain(j.inertia.iter())
                .chain([l.q_min, l.q_max, l.v_max, l.a_max, l.j_max, l.tau_max].iter())
                .all(|v| v.is_finite());
            if !finite {
                return Err(ModelError::NonFinite);
            }
            if j.mass <= 0.0 {
                return Err(ModelError::NonPositiveMass(i));
            }
            let inertia = j.inertia_matrix();
            let min_eig = inertia.symmetric_eigenvalues().min();
            if min_eig < -1e-12 {
                return Err(ModelError::BadInertia(i));
            }
            if l.q_min >= l.q_max {
                return Err(ModelError::BadLimit { joint: i, what: "position" });
            }
            for (what, v) in [
                ("velocity", l.v_max),
                ("acceleration", l.a_max),
                ("jerk", l.j_max),
                ("torque", l.tau_max),
            ] {
                if v <= 0.0 {
                    return Err(ModelError::BadLimit { joint: i, what });
                }
            }
        }
        if let Some(s) = desc.spheres.iter().find(|s| s.link >= n) {
            return Err(ModelError::BadSphere(s.link));
        }
        let ik_weights = desc.ik_weights.unwrap_or_else(|| vec![1.0; n]);
        if ik_weights.len() != n {
            return Err(ModelError::BadWeights { expected: n, got: ik_weights.len() });
        }
        if !desc.tool.is_finite() || desc.gravity.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self {
            joints: desc.joints,
            tool: desc.tool,
            gravity: Vector3::from(desc.gravity),
            spheres: desc.spheres,
            ik_weights,
        })
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn tool(&self) -> &Pose {
        &self.tool
    }

    pub fn gravity(&self) -> Vector3<f64> {
        self.gravity
    }

    pub fn spheres(&self) -> &[LinkSphere] {
        &self.spheres
    }

    pub fn ik_weights(&self) -> &[f64] {
        &self.ik_weights
    }

    pub fn limits(&self) -> impl Iterator<Item = &JointLimits> + '_ {
        self.joints.iter().map(|j| &j.limits)
    }

    pub fn within_position_limits(&self, q: &[f64]) -> bool {
        q.iter()
            .zip(self.limits())
            .all(|(&v, l)| v >= l.q_min && v <= l.q_max)
    }

    /// Copy with a different gravity vector.
    pub fn with_gravity(&self, g: Vector3<f64>) -> Self {
        let mut m = self.clone();
        m.gravity = g;
        m
    }

    /// Copy with every link mass and inertia scaled by `factor` (model mismatch).
    pub fn with_mass_scale(&self, factor: f64) -> Self {
        let mut m = self.clone();
        for j in &mut m.joints {
            j.mass *= factor;
            for v in &mut j.inertia {
                *v *= factor;
            }
        }
        m
    }

    /// Total distance from the base to the tool point when fully stretched.
    pub fn reach(&self) -> f64 {
        let links: f64 = self
            .joints
            .iter()
            .map(|j| (j.a * j.a + j.d * j.d).sqrt())
            .sum();
        links + self.tool.p.norm()
    }
}
