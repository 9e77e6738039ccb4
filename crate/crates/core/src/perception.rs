//! Synthetic stand-in for language-grounded detection and 6D pose estimation.
//!
//! Prompts resolve to scene objects by token overlap with their labels; pose
//! measurements are ground truth delayed by the sensor latency plus Gaussian
//! noise, with optional dropouts and outliers.

use std::collections::BTreeSet;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::PoseMeasurement;
use crate::geom::{EulerAngles, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("no object matches the prompt")]
    NoMatch,
    #[error("prompt matches several objects equally well: {0:?}")]
    Ambiguous(Vec<String>),
    #[error("detection failed")]
    DetectionFailed,
    #[error("unknown object {0:?}")]
    UnknownObject(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid sensor profile: {0}")]
    InvalidProfile(&'static str),
}

/// Ground-truth motion of an object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Static,
    /// Constant velocity, optionally stopping after `stop_after` seconds.
    Linear {
        velocity: [f64; 3],
        #[serde(default)]
        stop_after: Option<f64>,
    },
    /// `amplitude · sin(2π f t)` along `axis`; angles oscillate in phase.
    Sinusoid {
        axis: [f64; 3],
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        angular_amplitude: [f64; 3],
    },
    /// Piecewise-constant random acceleration (one draw per `segment` seconds)
    /// driving a critically damped spring about the initial pose, applied to
    /// position and yaw.
    Jitter {
        accel_std: f64,
        #[serde(default = "default_jitter_yaw_std")]
        yaw_accel_std: f64,
        #[serde(default = "default_jitter_segment")]
        segment: f64,
        #[serde(default = "default_jitter_omega")]
        omega: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_jitter_yaw_std() -> f64 {
    0.2
}

fn default_jitter_segment() -> f64 {
    0.1
}

fn default_jitter_omega() -> f64 {
    1.5
}

impl Motion {
    /// Preset by name with default parameters, as selected on the command line.
    pub fn preset(name: &str) -> Option<Motion> {
        Some(match name {
            "static" => Motion::Static,
            "linear" => Motion::Linear { velocity: [0.0, 0.05, 0.0], stop_after: Some(3.0) },
            "sinusoid" => Motion::Sinusoid {
                axis: [0.0, 1.0, 0.0],
                amplitude: 0.1,
                frequency: 0.15,
                angular_amplitude: [0.0, 0.0, 0.0],
            },
            "jitter" => Motion::Jitter {
                accel_std: 0.05,
                yaw_accel_std: default_jitter_yaw_std(),
                segment: default_jitter_segment(),
                omega: default_jitter_omega(),
                seed: 0,
            },
            _ => return None,
        })
    }

    /// Pose at time `t` of an object starting at `initial`.
    pub fn pose_at(&self, initial: &Pose, t: f64) -> Pose {
        let t = t.max(0.0);
        match self {
            Motion::Static => *initial,
            Motion::Linear { velocity, stop_after } => {
                let tm = stop_after.map_or(t, |s| t.min(s.max(0.0)));
                Pose::new(initial.p + Vector3::from(*velocity) * tm, initial.r)
            }
            Motion::Sinusoid { axis, amplitude, frequency, angular_amplitude } => {
                let s = (2.0 * std::f64::consts::PI * frequency * t).sin();
                let dir = Vector3::from(*axis);
                let dir = if dir.norm() > 0.0 { dir.normalize() } else { dir };
                let o = initial.euler().as_array();
                let o = EulerAngles::new(
                    o[0] + angular_amplitude[0] * s,
                    o[1] + angular_amplitude[1] * s,
                    o[2] + angular_amplitude[2] * s,
                );
                Pose::from_euler(initial.p + dir * (amplitude * s), o)
            }
            Motion::Jitter { accel_std, yaw_accel_std, segment, omega, seed } => {
                jitter_pose(initial, t, *accel_std, *yaw_accel_std, *segment, *omega, *seed)
            }
        }
    }
}

/// Exact solution of `y'' + 2ω y' + ω² y = a` over each constant-`a` segment.
fn jitter_pose(initial: &Pose, t: f64, accel_std: f64, yaw_std: f64, segment: f64, omega: f64, seed: u64) -> Pose {
    let segment = segment.max(1e-3);
    let mut y = [0.0f64; 4];
    let mut v = [0.0f64; 4];
    let stds = [accel_std, accel_std, accel_std, yaw_std];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
    let mut elapsed = 0.0;
    while elapsed < t {
        let tau = segment.min(t - elapsed);
        for i in 0..4 {
            let n: f64 = StandardNormal.sample(&mut rng);
            let a = n * stds[i];
            // Shift to the forced equilibrium a/ω², then free critically damped decay.
            let eq = a / (omega * omega);
            let y0 = y[i] - eq;
            let c = v[i] + omega * y0;
            let e = (-omega * tau).exp();
            y[i] = eq + (y0 + c * tau) * e;
            v[i] = (c - omega * (y0 + c * tau)) * e;
        }
        elapsed += segment;
    }
    let o = initial.euler().as_array();
    Pose::from_euler(
        initial.p + Vector3::new(y[0], y[1], y[2]),
        EulerAngles::new(o[0], o[1], o[2] + y[3]),
    )
}

/// A labeled object in the simulated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub labels: Vec<String>,
    #[serde(default = "default_motion")]
    pub motion: Motion,
    pub initial_pose: Pose,
    /// Object frame to grasp frame.
    #[serde(default)]
    pub grasp_offset: Pose,
    pub extents: [f64; 3],
}

fn default_motion() -> Motion {
    Motion::Static
}

impl SceneObject {
    pub fn pose_at(&self, t: f64) -> Pose {
        self.motion.pose_at(&self.initial_pose, t)
    }
}

/// Checks labels, extents and id uniqueness.
pub fn validate_scene(scene: &[SceneObject]) -> Result<(), PerceptionError> {
    let mut ids = BTreeSet::new();
    for o in scene {
        if o.labels.is_empty() || o.labels.iter().any(|l| l.trim().is_empty()) {
            return Err(PerceptionError::InvalidScene(format!("object {:?} needs a non-empty label", o.id)));
        }
        if o.extents.iter().any(|e| !(*e > 0.0)) {
            return Err(PerceptionError::InvalidScene(format!("object {:?} extents must be positive", o.id)));
        }
        if !o.initial_pose.is_finite() || !o.grasp_offset.is_finite() {
            return Err(PerceptionError::InvalidScene(format!("object {:?} has a non-finite pose", o.id)));
        }
        if !ids.insert(o.id.as_str()) {
            return Err(PerceptionError::InvalidScene(format!("duplicate object id {:?}", o.id)));
        }
    }
    Ok(())
}

fn find<'a>(scene: &'a [SceneObject], id: &str) -> Result<&'a SceneObject, PerceptionError> {
    scene
        .iter()
        .find(|o| o.id == id)
        .ok_or_else(|| PerceptionError::UnknownObject(id.to_string()))
}

/// Rates, delays and error model of the simulated perception stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorProfile {
    pub rate: f64,
    pub latency: f64,
    pub sigma_p: f64,
    pub sigma_o: f64,
    pub dropout_prob: f64,
    pub outlier_prob: f64,
    pub outlier_scale: f64,
    pub detect_latency: f64,
    pub detect_fail_prob: f64,
}

impl Default for SensorProfile {
    fn default() -> Self {
        Self {
            rate: 30.0,
            latency: 0.083,
            sigma_p: 0.005,
            sigma_o: 0.05,
            dropout_prob: 0.0,
            outlier_prob: 0.0,
            outlier_scale: 10.0,
            detect_latency: 0.5,
            detect_fail_prob: 0.08,
        }
    }
}

impl SensorProfile {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        let prob = |p: f64| (0.0..1.0).contains(&p);
        if !(self.rate > 0.0) {
            return Err(PerceptionError::InvalidProfile("rate must be positive"));
        }
        if !(self.latency >= 0.0 && self.detect_latency >= 0.0) {
            return Err(PerceptionError::InvalidProfile("latencies must be non-negative"));
        }
        if !(self.sigma_p >= 0.0 && self.sigma_o >= 0.0 && self.outlier_scale >= 0.0) {
            return Err(PerceptionError::InvalidProfile("noise scales must be non-negative"));
        }
        if !prob(self.dropout_prob) && self.dropout_prob != 1.0 {
            return Err(PerceptionError::InvalidProfile("dropout_prob must lie in [0, 1]"));
        }
        if !prob(self.outlier_prob) || !prob(self.detect_fail_prob) {
            return Err(PerceptionError::InvalidProfile("probabilities must lie in [0, 1)"));
        }
        Ok(())
    }
}

const LEADING_WORDS: &[&str] = &[
    "grasp", "grab", "pick", "take", "get", "fetch", "bring", "lift", "hold", "find", "hand", "give", "please", "up",
    "me", "can", "you", "could", "would", "go", "and",
];
const STOPWORDS: &[&str] = &["the", "a", "an", "this", "that", "of", "to", "please", "me", "it", "up", "on", "in", "at"];
const SYNONYMS: &[(&str, &str)] = &[
    ("pliers", "plier"),
    ("drills", "drill"),
    ("driller", "drill"),
    ("cube", "block"),
    ("brick", "block"),
    ("blocks", "block"),
    ("cup", "mug"),
    ("mugs", "mug"),
    ("tin", "can"),
    ("bottles", "bottle"),
    ("grey", "gray"),
    ("screwdrivers", "screwdriver"),
    ("hammers", "hammer"),
];

fn canonical(token: &str) -> &str {
    SYNONYMS.iter().find(|(from, _)| *from == token).map_or(token, |(_, to)| to)
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| canonical(t).to_string())
        .collect()
}

/// Content tokens of a prompt: lowercased, leading verb phrase and stopwords
/// removed, synonyms folded.
pub fn prompt_tokens(prompt: &str) -> Vec<String> {
    let all = tokens(prompt);
    let start = all.iter().position(|t| !LEADING_WORDS.contains(&t.as_str())).unwrap_or(all.len());
    all[start..].iter().filter(|t| !STOPWORDS.contains(&t.as_str())).cloned().collect()
}

/// A resolved prompt; the answer becomes available `latency` seconds after the request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: String,
    pub latency: f64,
}

/// Resolves a natural-language command to the object it refers to.
///
/// Exactly one uniform draw is taken from `rng` per call (the injected-failure
/// decision), so outcomes are reproducible for a given seed.
pub fn resolve_prompt(
    prompt: &str,
    scene: &[SceneObject],
    profile: &SensorProfile,
    rng: &mut impl Rng,
) -> Result<Detection, PerceptionError> {
    if prompt.trim().is_empty() {
        return Err(PerceptionError::EmptyPrompt);
    }
    let fail_draw: f64 = rng.random();
    let wanted: BTreeSet<String> = prompt_tokens(prompt).into_iter().collect();
    let mut best = 0usize;
    let mut winners: Vec<&SceneObject> = Vec::new();
    for obj in scene {
        let score = obj
            .labels
            .iter()
            .map(|l| tokens(l).into_iter().collect::<BTreeSet<_>>().intersection(&wanted).count())
            .max()
            .unwrap_or(0);
        if score > best {
            best = score;
            winners.clear();
        }
        if score == best && score > 0 {
            winners.push(obj);
        }
    }
    match winners.as_slice() {
        [] => Err(PerceptionError::NoMatch),
        [_] if fail_draw < profile.detect_fail_prob => Err(PerceptionError::DetectionFailed),
        [one] => Ok(Detection { id: one.id.clone(), latency: profile.detect_latency }),
        many => Err(PerceptionError::Ambiguous(many.iter().map(|o| o.id.clone()).collect())),
    }
}

/// Ground-truth pose of object `id` at time `t`.
pub fn object_pose_truth(scene: &[SceneObject], id: &str, t: f64) -> Result<Pose, PerceptionError> {
    Ok(find(scene, id)?.pose_at(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SensorReading {
    Measurement(PoseMeasurement),
    Dropout,
}

/// Corrupts the delayed truth `truth` (the object at `t − latency`) into a
/// reading stamped `t`.
pub fn corrupt_truth(truth: &Pose, t: f64, profile: &SensorProfile, rng: &mut impl Rng) -> SensorReading {
    let dropout: f64 = rng.random();
    if dropout < profile.dropout_prob {
        return SensorReading::Dropout;
    }
    let outlier: f64 = rng.random();
    let scale = if outlier < profile.outlier_prob { profile.outlier_scale } else { 1.0 };
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let dp = Vector3::new(normal(), normal(), normal()) * (profile.sigma_p * scale);
    let o = truth.euler().as_array();
    let so = profile.sigma_o * scale;
    let noisy = EulerAngles::new(o[0] + normal() * so, o[1] + normal() * so, o[2] + normal() * so);
    SensorReading::Measurement(PoseMeasurement { p: truth.p + dp, o: noisy, timestamp: t })
}

/// Simulated pose measurement of object `id` taken at time `t`.
pub fn sense_pose(
    scene: &[SceneObject],
    id: &str,
    t: f64,
    profile: &SensorProfile,
    rng: &mut impl Rng,
) -> Result<SensorReading, PerceptionError> {
    let truth = object_pose_truth(scene, id, t - profile.latency)?;
    Ok(corrupt_truth(&truth, t, profile, rng))
}
