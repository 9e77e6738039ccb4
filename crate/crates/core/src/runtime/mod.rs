//! Task orchestration: state machine, grasp targets, the multi-rate closed
//! loop, telemetry and the operator service.

mod fsm;
mod grasp;
mod mailbox;
pub mod service;
mod sim;
pub mod telemetry;
mod world;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fsm::{step_fsm, IllegalEvent, TaskEvent, TaskPhase};
pub use grasp::{derive_grasp_targets, heading, lifted, nearest_symmetric, retarget_gate, top_down, GraspSpec, InvalidOffset};
pub use mailbox::Mailbox;
pub use sim::Simulation;
pub use telemetry::{Event, Record, RunLog, RunOutcome};
pub use world::World;

use crate::config::{Config, ConfigError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Deterministic: stages run back to back as fast as possible.
    Virtual,
    /// Paced against the wall clock, planner on a worker thread.
    Realtime,
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Setup(String),
    #[error("run failed: {reason}")]
    RunFailed { reason: String, log: Box<RunLog> },
}

impl From<String> for RuntimeError {
    fn from(s: String) -> Self {
        RuntimeError::Setup(s)
    }
}

/// Keeps a realtime simulation within `slack` of the wall clock.
pub(crate) struct Pacer {
    origin: Instant,
    sim_origin: f64,
    speed: f64,
}

impl Pacer {
    pub(crate) fn new(sim_time: f64, speed: f64) -> Self {
        Self { origin: Instant::now(), sim_origin: sim_time, speed }
    }

    /// Simulated time the wall clock has reached.
    pub(crate) fn target(&self) -> f64 {
        self.sim_origin + self.origin.elapsed().as_secs_f64() * self.speed
    }

    /// Sleeps while the simulation runs ahead; returns how far it lags behind.
    pub(crate) fn wait(&self, sim_time: f64) -> f64 {
        let target = (sim_time - self.sim_origin) / self.speed;
        let now = self.origin.elapsed().as_secs_f64();
        if target > now + 0.002 {
            std::thread::sleep(Duration::from_secs_f64(target - now));
            0.0
        } else {
            (now - target).max(0.0)
        }
    }
}

/// Runs the configured task until it finishes or `cfg.task.duration` elapses.
///
/// A run that ends in `Recover` without regaining the track is reported as
/// [`RuntimeError::RunFailed`]; other unsuccessful runs return their log with
/// a failed outcome.
pub fn run_closed_loop(cfg: Config, clock: ClockMode, seed: u64) -> Result<RunLog, RuntimeError> {
    let mut sim = Simulation::new(cfg, seed, clock, true)?;
    match clock {
        ClockMode::Virtual => {
            while !sim.is_finished() {
                sim.step();
            }
        }
        ClockMode::Realtime => {
            let pacer = Pacer::new(sim.time(), 1.0);
            let mut last_report = f64::NEG_INFINITY;
            while !sim.is_finished() {
                sim.step();
                let lag = pacer.wait(sim.time());
                if lag > 0.05 && sim.time() - last_report > 1.0 {
                    last_report = sim.time();
                    sim.report_overrun(lag);
                }
            }
        }
    }
    let log = sim.into_log();
    let failed_in_recover = log.events().any(|(_, e)| matches!(e, Event::RunFailed { .. }));
    match log.outcome() {
        Some(RunOutcome::Failed { reason }) if failed_in_recover => {
            Err(RuntimeError::RunFailed { reason: reason.clone(), log: Box::new(log) })
        }
        _ => Ok(log),
    }
}
