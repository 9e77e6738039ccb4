//! Line-delimited JSON run records. Field names are part of the telemetry
//! schema; bump [`SCHEMA_VERSION`] on any incompatible change.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::fsm::{TaskEvent, TaskPhase};
use super::ClockMode;
use crate::filter::TrackStatus;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperAction {
    Close,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sensor,
    Planner,
    Controller,
}

/// Discrete happenings; serialized with a `type` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Prompt { text: String },
    Detected { id: String, latency: f64 },
    DetectionRetry { attempt: u32, reason: String },
    DetectionFailed { reason: String },
    Phase { from: TaskPhase, to: TaskPhase, cause: TaskEvent },
    TrackingLost { dropouts: u32 },
    TrackingRegained,
    /// First target pose committed from the filtered track.
    Target { p: [f64; 3], o: [f64; 3] },
    Retarget { p: [f64; 3], o: [f64; 3], pos_err: f64, ang_err: f64 },
    /// Target re-read below the retarget tolerance because the arm came to
    /// rest outside the reach tolerance of the current grasp estimate.
    Refine { pos_err: f64, ang_err: f64 },
    WaypointPassed { speed: f64 },
    PlanError { reason: String },
    GripperCommand { action: GripperAction, phase: TaskPhase },
    GripperClosed { captured: bool },
    GripperOpened,
    ObjectOverride { id: String, p: [f64; 3], o: [f64; 3] },
    Overrun { stage: Stage, late_by: f64 },
    RunFailed { reason: String },
    Done { success: bool, pos_err: f64, ang_err: f64 },
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::Prompt { .. } => "prompt",
            Event::Detected { .. } => "detected",
            Event::DetectionRetry { .. } => "detection_retry",
            Event::DetectionFailed { .. } => "detection_failed",
            Event::Phase { .. } => "phase",
            Event::TrackingLost { .. } => "tracking_lost",
            Event::TrackingRegained => "tracking_regained",
            Event::Target { .. } => "target",
            Event::Retarget { .. } => "retarget",
            Event::Refine { .. } => "refine",
            Event::WaypointPassed { .. } => "waypoint_passed",
            Event::PlanError { .. } => "plan_error",
            Event::GripperCommand { .. } => "gripper_command",
            Event::GripperClosed { .. } => "gripper_closed",
            Event::GripperOpened => "gripper_opened",
            Event::ObjectOverride { .. } => "object_override",
            Event::Overrun { .. } => "overrun",
            Event::RunFailed { .. } => "run_failed",
            Event::Done { .. } => "done",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanOutcome {
    /// New trajectory queued for the next period.
    Planned,
    /// Planned after dropping the tolerance boxes.
    Relaxed,
    /// Nothing to plan in this phase.
    Hold,
    /// Target track not yet established.
    Waiting,
    /// Solver or IK failure; the previous trajectory stays active.
    Failed,
    /// Submitted to the worker; the result is reported when it arrives.
    Submitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Success,
    Failed { reason: String },
    /// The configured duration elapsed before the task finished.
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Header {
        schema: u32,
        seed: u64,
        clock: ClockMode,
        dof: usize,
        controller_dt: f64,
        planner_period: f64,
        sensor_rate: f64,
    },
    Sensor {
        t: f64,
        tick: u64,
        object: Option<String>,
        /// `[px, py, pz, roll, pitch, yaw]` as measured.
        reading: Option<[f64; 6]>,
        dropout: bool,
        status: TrackStatus,
        /// Filtered pose at the current time.
        estimate: Option<[f64; 6]>,
        /// The grasp implied by the estimate differs from the committed one by
        /// more than the retarget tolerance.
        gate_open: bool,
    },
    Planner {
        t: f64,
        tick: u64,
        phase: TaskPhase,
        outcome: PlanOutcome,
        n: usize,
        n_s: usize,
        iterations: usize,
        converged: bool,
        cost: f64,
        /// Solver wall time; absent in virtual-clock runs to keep logs reproducible.
        wall_time: Option<f64>,
        /// Time the trajectory takes over from the running one.
        start: Option<f64>,
        waypoint: Option<Vec<f64>>,
        goal: Option<Vec<f64>>,
        /// Max-abs jump of `[q, q̇, q̈]` references at the handover instant.
        handover_jump: Option<[f64; 3]>,
    },
    Controller {
        t: f64,
        tick: u64,
        q: Vec<f64>,
        qd: Vec<f64>,
        q_ref: Vec<f64>,
        tau: Vec<f64>,
    },
    Event {
        t: f64,
        #[serde(flatten)]
        event: Event,
    },
    Summary {
        t: f64,
        outcome: RunOutcome,
        phase: TaskPhase,
        sensor_ticks: u64,
        planner_ticks: u64,
        controller_ticks: u64,
    },
}

#[derive(Serialize, Deserialize)]
struct Line {
    v: u32,
    #[serde(flatten)]
    record: Record,
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("log i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("log line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("log line {line}: schema version {found}, expected {SCHEMA_VERSION}")]
    Version { line: usize, found: u32 },
}

/// Ordered records of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<Record>,
}

impl RunLog {
    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn events(&self) -> impl Iterator<Item = (f64, &Event)> + '_ {
        self.records.iter().filter_map(|r| match r {
            Record::Event { t, event } => Some((*t, event)),
            _ => None,
        })
    }

    pub fn count_events(&self, name: &str) -> usize {
        self.events().filter(|(_, e)| e.name() == name).count()
    }

    pub fn outcome(&self) -> Option<&RunOutcome> {
        self.records.iter().rev().find_map(|r| match r {
            Record::Summary { outcome, .. } => Some(outcome),
            _ => None,
        })
    }

    pub fn succeeded(&self) -> bool {
        matches!(self.outcome(), Some(RunOutcome::Success))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), LogError> {
        for r in &self.records {
            serde_json::to_writer(&mut w, &Line { v: SCHEMA_VERSION, record: r.clone() })
                .map_err(|e| LogError::Parse { line: 0, msg: e.to_string() })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, LogError> {
        let mut log = RunLog::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| LogError::Parse { line: i + 1, msg: e.to_string() })?;
            let found = value.get("v").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
            if found != SCHEMA_VERSION {
                return Err(LogError::Version { line: i + 1, found });
            }
            let parsed: Line =
                serde_json::from_value(value).map_err(|e| LogError::Parse { line: i + 1, msg: e.to_string() })?;
            log.push(parsed.record);
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunLog {
        let mut log = RunLog::default();
        log.push(Record::Header {
            schema: SCHEMA_VERSION,
            seed: 7,
            clock: ClockMode::Virtual,
            dof: 2,
            controller_dt: 0.001,
            planner_period: 0.1,
            sensor_rate: 30.0,
        });
        log.push(Record::Event { t: 0.5, event: Event::Detected { id: "drill".into(), latency: 0.5 } });
        log.push(Record::Event {
            t: 0.5,
            event: Event::Phase { from: TaskPhase::Detecting, to: TaskPhase::ApproachGrasp, cause: TaskEvent::Detected },
        });
        log.push(Record::Controller { t: 0.001, tick: 1, q: vec![0.1, 0.2], qd: vec![0.0; 2], q_ref: vec![0.1, 0.2], tau: vec![1.0, -1.0] });
        log.push(Record::Summary {
            t: 1.0,
            outcome: RunOutcome::Failed { reason: "x".into() },
            phase: TaskPhase::Recover,
            sensor_ticks: 30,
            planner_ticks: 10,
            controller_ticks: 1000,
        });
        log
    }

    #[test]
    fn round_trips_and_keeps_field_names() {
        let log = sample();
        let text = log.to_jsonl();
        let first_event = text.lines().nth(1).unwrap();
        assert_eq!(first_event, r#"{"v":1,"kind":"event","t":0.5,"type":"detected","id":"drill","latency":0.5}"#);
        let back = RunLog::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.count_events("phase"), 1);
        assert!(!back.succeeded());
    }

    #[test]
    fn rejects_other_schema_versions() {
        let text = sample().to_jsonl().replacen("\"v\":1", "\"v\":99", 1);
        assert!(matches!(RunLog::read_jsonl(text.as_bytes()), Err(LogError::Version { line: 1, found: 99 })));
        assert!(matches!(RunLog::read_jsonl(&b"{oops"[..]), Err(LogError::Parse { line: 1, .. })));
    }
}
