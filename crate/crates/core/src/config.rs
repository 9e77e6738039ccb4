//! Structured configuration: every section falls back to the bundled defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{IkConfig, RobotModel};
use crate::filter::FilterTuning;
use crate::geom::Pose;
use crate::perception::{validate_scene, Motion, SceneObject, SensorProfile};
use crate::servo::ServoGains;
use crate::trajopt::{Bounds, SolveOptions, Sphere, Weights};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config syntax: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Computed-torque servo settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GainsConfig {
    /// Natural frequency of the critically damped error dynamics, rad/s.
    pub omega: f64,
    /// Explicit per-joint gains override `omega` when both are given.
    pub kv: Option<Vec<f64>>,
    pub kd: Option<Vec<f64>>,
    /// Controller period, s.
    pub dt: f64,
    /// Mass scale of the controller's model relative to the plant (1 = exact).
    pub mass_scale: f64,
}

impl Default for GainsConfig {
    fn default() -> Self {
        Self { omega: 20.0, kv: None, kd: None, dt: 0.001, mass_scale: 1.0 }
    }
}

impl GainsConfig {
    pub fn servo_gains(&self, dof: usize) -> Result<ServoGains, ConfigError> {
        let r = match (&self.kv, &self.kd) {
            (Some(kv), Some(kd)) => ServoGains::new(kv.clone(), kd.clone()),
            (None, None) => ServoGains::critically_damped(self.omega, dof),
            _ => return Err(ConfigError::Invalid("gains.kv and gains.kd must be given together".into())),
        };
        let g = r.map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if g.kv().len() != dof {
            return Err(ConfigError::Invalid(format!("gains need {dof} entries")));
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Knot spacing and replanning period, s.
    pub h: f64,
    pub n_min: usize,
    pub n_max: usize,
    /// Fraction of the joint limits used for the horizon-length estimate.
    pub horizon_scale: f64,
    /// Fraction of the joint limits imposed inside the optimizer.
    pub bound_scale: f64,
    pub weights: Weights,
    pub waypoint_half_width: f64,
    pub goal_half_width: f64,
    pub r_safe: f64,
    pub max_iterations: usize,
    pub stationarity_tol: f64,
    /// Per-solve wall-clock budget in realtime mode, s.
    pub time_budget: f64,
    pub ik: IkConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            h: 0.1,
            n_min: 10,
            n_max: 50,
            horizon_scale: 0.5,
            bound_scale: 1.0,
            weights: Weights::default(),
            waypoint_half_width: 0.05,
            goal_half_width: 0.01,
            r_safe: 0.02,
            max_iterations: 20,
            stationarity_tol: 1e-6,
            time_budget: 0.1,
            ik: IkConfig::default(),
        }
    }
}

impl PlannerConfig {
    pub fn solve_options(&self, deterministic: bool) -> SolveOptions {
        SolveOptions {
            max_iterations: self.max_iterations,
            stationarity_tol: self.stationarity_tol,
            time_budget: (!deterministic).then_some(self.time_budget),
        }
    }

    pub fn bounds(&self, robot: &RobotModel) -> Bounds {
        Bounds::from_model(robot, self.bound_scale)
    }

    pub fn horizon_bounds(&self, robot: &RobotModel) -> Bounds {
        Bounds::from_model(robot, self.horizon_scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SceneConfig {
    pub objects: Vec<SceneObject>,
    pub obstacles: Vec<Sphere>,
}

/// Pick-and-place task parameters. Tolerances are `[m, rad]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub prompt: String,
    pub prompt_time: f64,
    pub home: Vec<f64>,
    pub pregrasp_offset: f64,
    /// Where the grasped object should be put down.
    pub place_pose: Pose,
    pub retarget_tol: [f64; 2],
    /// End effector vs. target when the gripper is commanded.
    pub reach_tol: [f64; 2],
    /// Joint speed below which the arm counts as at rest, rad/s.
    pub settle_speed: f64,
    /// Released object vs. place pose for a successful run.
    pub place_tol: [f64; 2],
    /// Gripper vs. true object grasp frame for the object to be held.
    pub capture_tol: [f64; 2],
    pub gripper_time: f64,
    pub detect_retries: u32,
    pub recover_timeout: f64,
    /// Measurements the track needs before its pose is used as a target.
    pub min_track_measurements: u32,
    pub duration: f64,
    pub stop_when_done: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            prompt: "Grasp the orange drill".into(),
            prompt_time: 0.0,
            home: vec![0.0, 0.3, 0.0, -1.6, 0.0, 1.2, 0.0],
            pregrasp_offset: 0.05,
            place_pose: Pose::from_translation(nalgebra::Vector3::new(0.4, -0.3, 0.2)),
            retarget_tol: [0.02, 0.15],
            reach_tol: [0.01, 0.05],
            settle_speed: 0.05,
            place_tol: [0.03, 0.2],
            capture_tol: [0.02, 0.1],
            gripper_time: 0.5,
            detect_retries: 3,
            recover_timeout: 10.0,
            min_track_measurements: 10,
            duration: 30.0,
            stop_when_done: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TelemetryConfig {
    /// Controller records are written every `controller_decimation` ticks.
    pub controller_decimation: u32,
    /// Server `scene_state` broadcasts per simulated second.
    pub scene_state_rate: f64,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self { controller_decimation: 1, scene_state_rate: 10.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    pub robot: RobotModel,
    #[serde(default)]
    pub gains: GainsConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub filter: FilterTuning,
    #[serde(default)]
    pub sensor: SensorProfile,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub telemetry: TelemetryConfig,
}

/// Recursively overlays `top` onto `base`; arrays and scalars are replaced.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl Config {
    pub fn bundled() -> Self {
        Self::from_toml_str("").expect("bundled config is valid")
    }

    /// Parses `text` on top of the bundled defaults and validates the result.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let parse = |s: &str| s.parse::<toml::Table>().map_err(|e| ConfigError::Parse(e.to_string()));
        let mut table = parse(crate::BUNDLED_CONFIG)?;
        merge(&mut table, parse(text)?);
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces the motion of every scene object with the named preset.
    pub fn with_object_motion(mut self, preset: &str) -> Result<Self, ConfigError> {
        let motion =
            Motion::preset(preset).ok_or_else(|| ConfigError::Invalid(format!("unknown motion preset {preset:?}")))?;
        for o in &mut self.scene.objects {
            o.motion = motion.clone();
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |s: String| Err(ConfigError::Invalid(s));
        let dof = self.robot.dof();
        self.gains.servo_gains(dof)?;
        if !(self.gains.dt > 0.0 && self.gains.dt <= 0.01) {
            return invalid("gains.dt must lie in (0, 0.01]".into());
        }
        if !(self.gains.mass_scale > 0.0) {
            return invalid("gains.mass_scale must be positive".into());
        }
        let p = &self.planner;
        if !(p.h > 0.0) || p.n_min < 2 || p.n_max < p.n_min {
            return invalid("planner needs h > 0 and 2 <= n_min <= n_max".into());
        }
        // The schedule is built on integer controller ticks.
        let ticks = p.h / self.gains.dt;
        if (ticks - ticks.round()).abs() > 1e-9 {
            return invalid("planner.h must be a multiple of gains.dt".into());
        }
        if !(p.horizon_scale > 0.0 && p.bound_scale > 0.0) {
            return invalid("planner limit scales must be positive".into());
        }
        if !(p.weights.w1 > 0.0 && p.weights.w2 > 0.0 && p.weights.w3 > 0.0) {
            return invalid("planner weights must be positive".into());
        }
        if !(p.waypoint_half_width > 0.0 && p.goal_half_width > 0.0 && p.r_safe >= 0.0) {
            return invalid("tolerance half-widths must be positive".into());
        }
        self.sensor.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.filter.config(1.0 / self.sensor.rate).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        validate_scene(&self.scene.objects).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.scene.obstacles.iter().any(|o| !(o.radius > 0.0) || o.center.iter().any(|c| !c.is_finite())) {
            return invalid("obstacles need finite centers and positive radii".into());
        }
        let t = &self.task;
        if t.home.len() != dof || !self.robot.within_position_limits(&t.home) {
            return invalid(format!("task.home must hold {dof} joint values inside the limits"));
        }
        if !(t.pregrasp_offset > 0.0) {
            return invalid("task.pregrasp_offset must be positive".into());
        }
        let tol_ok = |x: &[f64; 2]| x.iter().all(|v| *v > 0.0);
        if ![t.retarget_tol, t.reach_tol, t.place_tol, t.capture_tol].iter().all(tol_ok) {
            return invalid("task tolerances must be positive".into());
        }
        if !(t.gripper_time >= 0.0 && t.recover_timeout > 0.0 && t.duration > 0.0 && t.settle_speed > 0.0) {
            return invalid("task timings must be positive".into());
        }
        if self.telemetry.controller_decimation == 0 || !(self.telemetry.scene_state_rate > 0.0) {
            return invalid("telemetry rates must be positive".into());
        }
        Ok(())
    }
}
