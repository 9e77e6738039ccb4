//! Closed-loop simulation advanced one controller tick at a time.
//!
//! Within a tick the stages run in a fixed order: sensor (30 Hz) feeding the
//! pose filter, planner (10 Hz), controller (1 kHz). A trajectory planned at
//! `t` takes over at `t + h` from the running one, whose knot at that instant
//! is its fixed head, so references stay C² across handovers.

use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fsm::{step_fsm, TaskEvent, TaskPhase};
use super::grasp::{derive_grasp_targets, heading, lifted, nearest_symmetric, retarget_gate, top_down, GraspSpec};
use super::mailbox::Mailbox;
use super::telemetry::{Event, GripperAction, PlanOutcome, Record, RunLog, RunOutcome, Stage, SCHEMA_VERSION};
use super::world::World;
use super::{ClockMode, RuntimeError};
use crate::arm::{IkTarget, RobotModel};
use crate::config::Config;
use crate::filter::{TrackStatus, Tracker};
use crate::geom::{pose_distance, Pose};
use crate::perception::{corrupt_truth, resolve_prompt, Detection, PerceptionError, SensorReading};
use crate::servo::{computed_torque, feedback_accel, plant_step, PlantState, ServoGains, ServoReference};
use crate::trajopt::{
    horizon_lengths, sample_reference, solve, PlanError, PlanProblem, PlanState, SolveOptions, ToleranceSet,
    Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Gripper {
    Open,
    Closing { done: u64 },
    Closed,
    Opening { done: u64 },
}

#[derive(Debug)]
struct PendingDetection {
    ready: u64,
    attempt: u32,
    result: Result<Detection, PerceptionError>,
}

/// Joint-space targets of the current phase.
#[derive(Debug, Clone)]
struct Targets {
    /// Committed object pose (approach only).
    object: Option<Pose>,
    goal_pose: Pose,
    q_waypoint: Vec<f64>,
    q_goal: Vec<f64>,
    waypoint_passed: bool,
}

#[derive(Debug, Clone)]
struct PlanJob {
    problem: PlanProblem,
    previous: Option<Trajectory>,
    start: f64,
    start_tick: u64,
    phase: TaskPhase,
    handover_from: Option<(Trajectory, f64)>,
}

struct PlanResult {
    job: PlanJob,
    result: Result<Trajectory, PlanError>,
    wall_time: f64,
}

struct Worker {
    jobs: Mailbox<PlanJob>,
    results: Mailbox<PlanResult>,
    handle: Option<JoinHandle<()>>,
}

impl Worker {
    fn spawn(robot: Arc<RobotModel>, opts: SolveOptions) -> Self {
        let jobs: Mailbox<PlanJob> = Mailbox::new();
        let results = Mailbox::new();
        let (rx, tx) = (jobs.clone(), results.clone());
        let handle = std::thread::spawn(move || {
            while !rx.is_closed() {
                if let Some(job) = rx.take_timeout(Duration::from_millis(50)) {
                    tx.put(run_job(job, &robot, &opts));
                }
            }
        });
        Self { jobs, results, handle: Some(handle) }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.jobs.close();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn run_job(job: PlanJob, robot: &RobotModel, opts: &SolveOptions) -> PlanResult {
    let started = Instant::now();
    let robot = (!job.problem.obstacles.is_empty()).then_some(robot);
    let result = solve(&job.problem, job.previous.as_ref(), robot, opts);
    PlanResult { job, result, wall_time: started.elapsed().as_secs_f64() }
}

/// Reference of `traj` at absolute time `t`, holding the final knot afterwards.
fn reference_at(traj: &Trajectory, t: f64) -> ServoReference {
    let rel = (t - traj.t0).clamp(0.0, traj.duration());
    sample_reference(traj, rel).expect("time clamped into the trajectory")
}

fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

fn pose6(p: &Pose) -> [f64; 6] {
    let o = p.euler();
    [p.p.x, p.p.y, p.p.z, o.roll, o.pitch, o.yaw]
}

fn pose_parts(p: &Pose) -> ([f64; 3], [f64; 3]) {
    (p.p.into(), p.euler().as_array())
}

pub struct Simulation {
    cfg: Config,
    seed: u64,
    clock: ClockMode,
    robot: Arc<RobotModel>,
    ctrl_model: RobotModel,
    gains: ServoGains,
    spec: GraspSpec,
    solve_opts: SolveOptions,
    dt: f64,
    plan_ticks: u64,
    tick: u64,
    rng: ChaCha8Rng,
    plant: PlantState,
    q_hold: DVector<f64>,
    world: World,
    phase: TaskPhase,
    target: Option<usize>,
    tracker: Tracker,
    track_updates: u32,
    detection: Option<PendingDetection>,
    prompt_text: Option<String>,
    auto_prompt: bool,
    active: Option<Trajectory>,
    queued: Option<(u64, Trajectory)>,
    targets: Option<Targets>,
    gripper: Gripper,
    recover_since: Option<f64>,
    log: RunLog,
    fresh_events: Vec<(f64, Event)>,
    outcome: Option<RunOutcome>,
    finished: bool,
    counts: [u64; 3],
    worker: Option<Worker>,
}

impl Simulation {
    /// `auto_prompt` issues the configured prompt at its configured time.
    pub fn new(cfg: Config, seed: u64, clock: ClockMode, auto_prompt: bool) -> Result<Self, RuntimeError> {
        cfg.validate()?;
        let dof = cfg.robot.dof();
        let gains = cfg.gains.servo_gains(dof)?;
        let t = &cfg.task;
        let spec = GraspSpec::new(t.pregrasp_offset, t.place_pose, (t.retarget_tol[0], t.retarget_tol[1]))
            .map_err(|e| RuntimeError::Setup(e.to_string()))?;
        let robot = Arc::new(cfg.robot.clone());
        let ctrl_model = cfg.robot.with_mass_scale(cfg.gains.mass_scale);
        let solve_opts = cfg.planner.solve_options(clock == ClockMode::Virtual);
        let worker = (clock == ClockMode::Realtime).then(|| Worker::spawn(Arc::clone(&robot), solve_opts));
        let home = DVector::from_vec(t.home.clone());
        let dt = cfg.gains.dt;
        let mut log = RunLog::default();
        log.push(Record::Header {
            schema: SCHEMA_VERSION,
            seed,
            clock,
            dof,
            controller_dt: dt,
            planner_period: cfg.planner.h,
            sensor_rate: cfg.sensor.rate,
        });
        Ok(Self {
            seed,
            clock,
            ctrl_model,
            gains,
            spec,
            solve_opts,
            dt,
            plan_ticks: (cfg.planner.h / dt).round() as u64,
            tick: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            plant: PlantState::at_rest(home.clone()),
            q_hold: home,
            world: World::new(&cfg.scene.objects, cfg.sensor.latency + 1.0),
            phase: TaskPhase::Idle,
            target: None,
            tracker: Tracker::new(cfg.filter, cfg.sensor.latency),
            track_updates: 0,
            detection: None,
            prompt_text: None,
            auto_prompt,
            active: None,
            queued: None,
            targets: None,
            gripper: Gripper::Open,
            recover_since: None,
            log,
            fresh_events: Vec::new(),
            outcome: None,
            finished: false,
            counts: [0; 3],
            worker,
            robot,
            cfg,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.dt
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn phase(&self) -> TaskPhase {
        self.phase
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn outcome(&self) -> Option<&RunOutcome> {
        self.outcome.as_ref()
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn plant_state(&self) -> &PlantState {
        &self.plant
    }

    pub fn active_plan(&self) -> Option<&Trajectory> {
        self.active.as_ref()
    }

    pub fn target_id(&self) -> Option<&str> {
        self.target.map(|i| self.world.object(i).id.as_str())
    }

    pub fn object_truth(&self, id: &str) -> Option<Pose> {
        self.world.index_of(id).map(|i| self.world.truth(i, self.time()))
    }

    pub fn object_ids(&self) -> Vec<String> {
        self.world.objects().map(|o| o.id.clone()).collect()
    }

    /// Events emitted since the last call.
    pub fn drain_events(&mut self) -> Vec<(f64, Event)> {
        std::mem::take(&mut self.fresh_events)
    }

    /// Consumes the simulation, closing the log with a summary record.
    pub fn into_log(mut self) -> RunLog {
        self.finish(None);
        std::mem::take(&mut self.log)
    }

    /// Records that the realtime loop fell `lag` seconds behind the wall clock.
    pub fn report_overrun(&mut self, lag: f64) {
        self.emit(Event::Overrun { stage: Stage::Controller, late_by: lag });
    }

    fn emit(&mut self, event: Event) {
        let t = self.time();
        self.fresh_events.push((t, event.clone()));
        self.log.push(Record::Event { t, event });
    }

    fn transition(&mut self, cause: TaskEvent) {
        match step_fsm(self.phase, cause) {
            Ok(to) => {
                let from = self.phase;
                self.phase = to;
                self.emit(Event::Phase { from, to, cause });
            }
            Err(e) => {
                // Orchestration bug: surface loudly in tests, log in production.
                debug_assert!(false, "{e}");
                self.emit(Event::PlanError { reason: e.to_string() });
            }
        }
    }

    fn finish(&mut self, outcome: Option<RunOutcome>) {
        if self.finished {
            return;
        }
        self.finished = true;
        self.outcome = Some(outcome.or_else(|| self.outcome.clone()).unwrap_or(RunOutcome::Incomplete));
        let [sensor_ticks, planner_ticks, controller_ticks] = self.counts;
        self.log.push(Record::Summary {
            t: self.time(),
            outcome: self.outcome.clone().expect("set above"),
            phase: self.phase,
            sensor_ticks,
            planner_ticks,
            controller_ticks,
        });
    }

    // ---- external commands -------------------------------------------------

    /// Starts object detection for `text`; only accepted while idle.
    pub fn submit_prompt(&mut self, text: &str) -> Result<(), String> {
        if self.finished {
            return Err("run finished".into());
        }
        if self.phase != TaskPhase::Idle {
            return Err(format!("busy in phase {:?}", self.phase));
        }
        if text.trim().is_empty() {
            return Err(PerceptionError::EmptyPrompt.to_string());
        }
        self.emit(Event::Prompt { text: text.to_string() });
        self.transition(TaskEvent::PromptReceived);
        self.start_detection(text.to_string(), 1);
        Ok(())
    }

    fn start_detection(&mut self, text: String, attempt: u32) {
        let scene = self.world.scene();
        let result = resolve_prompt(&text, &scene, &self.cfg.sensor, &mut self.rng);
        let ready = self.tick + (self.cfg.sensor.detect_latency / self.dt).round() as u64;
        self.detection = Some(PendingDetection { ready, attempt, result });
        self.prompt_text = Some(text);
    }

    /// Operator override: holds object `id` at `pose` from now on.
    pub fn set_object_pose(&mut self, id: &str, pose: Pose) -> Result<(), String> {
        if !pose.is_finite() {
            return Err("pose is not finite".into());
        }
        let idx = self.world.index_of(id).ok_or_else(|| format!("unknown object {id:?}"))?;
        if self.world.is_attached(idx) {
            return Err(format!("object {id:?} is held by the gripper"));
        }
        self.world.hold_at(idx, self.time(), pose);
        let (p, o) = pose_parts(&pose);
        self.emit(Event::ObjectOverride { id: id.to_string(), p, o });
        Ok(())
    }

    // ---- the tick ---------------------------------------------------------

    fn sensor_fires(&self, i: u64) -> bool {
        let per_tick = self.cfg.sensor.rate * self.dt;
        let k = |i: u64| (i as f64 * per_tick + 1e-9).floor() as i64;
        i == 0 || k(i) != k(i - 1)
    }

    /// Advances the simulation by one controller period.
    pub fn step(&mut self) {
        if self.finished {
            return;
        }
        let i = self.tick;
        let t = self.time();
        self.bookkeeping(i, t);
        if !self.finished && self.sensor_fires(i) {
            self.counts[0] += 1;
            self.sensor_stage(i, t);
        }
        if !self.finished && i % self.plan_ticks == 0 {
            self.counts[1] += 1;
            self.planner_stage(i, t);
        }
        if !self.finished {
            self.counts[2] += 1;
            self.controller_stage(i, t);
        }
        self.tick += 1;
        if !self.finished && self.time() >= self.cfg.task.duration - 1e-9 {
            self.finish(None);
        }
    }

    fn bookkeeping(&mut self, i: u64, t: f64) {
        if self.auto_prompt && i == (self.cfg.task.prompt_time / self.dt).round() as u64 {
            let prompt = self.cfg.task.prompt.clone();
            if let Err(reason) = self.submit_prompt(&prompt) {
                self.emit(Event::DetectionFailed { reason });
                if self.cfg.task.stop_when_done {
                    self.finish(Some(RunOutcome::Failed { reason: "prompt rejected".into() }));
                }
            }
        }
        if let Some(res) = self.worker.as_ref().and_then(|w| w.results.try_take()) {
            self.accept_result(res, i);
        }
        if self.queued.as_ref().is_some_and(|(start, _)| *start <= i) {
            self.active = self.queued.take().map(|(_, tr)| tr);
        }
        let tool = self.robot.forward_kinematics(self.plant.q.as_slice());
        self.world.record_tool(t, tool);
        if self.detection.as_ref().is_some_and(|d| d.ready <= i) {
            self.finish_detection();
        }
        match self.gripper {
            Gripper::Closing { done } if done <= i => self.gripper_closed(t, &tool),
            Gripper::Opening { done } if done <= i => self.gripper_opened(t),
            _ => {}
        }
    }

    fn finish_detection(&mut self) {
        let Some(d) = self.detection.take() else { return };
        match d.result {
            Ok(det) => {
                self.target = self.world.index_of(&det.id);
                self.tracker.reset();
                self.track_updates = 0;
                self.targets = None;
                self.emit(Event::Detected { id: det.id, latency: det.latency });
                self.transition(TaskEvent::Detected);
            }
            Err(PerceptionError::DetectionFailed) if d.attempt <= self.cfg.task.detect_retries => {
                self.emit(Event::DetectionRetry { attempt: d.attempt, reason: PerceptionError::DetectionFailed.to_string() });
                let text = self.prompt_text.clone().unwrap_or_default();
                self.start_detection(text, d.attempt + 1);
            }
            Err(e) => {
                self.emit(Event::DetectionFailed { reason: e.to_string() });
                self.transition(TaskEvent::DetectionFailed);
                if self.auto_prompt && self.cfg.task.stop_when_done {
                    self.finish(Some(RunOutcome::Failed { reason: format!("detection: {e}") }));
                }
            }
        }
    }

    fn sensor_stage(&mut self, i: u64, t: f64) {
        let tracking = !matches!(self.phase, TaskPhase::Idle | TaskPhase::Detecting | TaskPhase::Done);
        let Some(idx) = self.target.filter(|_| tracking) else {
            self.log.push(Record::Sensor {
                t,
                tick: i,
                object: None,
                reading: None,
                dropout: false,
                status: self.tracker.status(),
                estimate: None,
                gate_open: false,
            });
            return;
        };
        let truth = self.world.truth(idx, t - self.cfg.sensor.latency);
        let reading = corrupt_truth(&truth, t, &self.cfg.sensor, &mut self.rng);
        let before = self.tracker.status();
        let applied = match &reading {
            SensorReading::Measurement(z) => self.tracker.on_measurement(z).map(|_| self.track_updates += 1),
            SensorReading::Dropout => self.tracker.on_dropout(t),
        };
        if applied.is_err() {
            self.tracker.reset();
            self.track_updates = 0;
        }
        let after = self.tracker.status();
        if after == TrackStatus::Coasting && before != TrackStatus::Coasting && self.phase == TaskPhase::ApproachGrasp {
            self.emit(Event::TrackingLost { dropouts: self.tracker.consecutive_dropouts() });
            self.transition(TaskEvent::TrackingLost);
            self.recover_since = Some(t);
        }
        if after == TrackStatus::Tracking && self.phase == TaskPhase::Recover {
            self.emit(Event::TrackingRegained);
            self.transition(TaskEvent::TrackingRegained);
            self.recover_since = None;
        }
        let estimate = self.tracker.estimate_at(t);
        let committed = self.targets.as_ref().and_then(|tg| tg.object.map(|o| (o, heading(&tg.goal_pose))));
        let gate_open = match (committed, estimate) {
            (Some((c, yaw_ref)), Some(e)) => self.retarget_check(&c, &e, yaw_ref).0,
            _ => false,
        };
        let (reading, dropout) = match reading {
            SensorReading::Measurement(z) => {
                let o = z.o.as_array();
                (Some([z.p.x, z.p.y, z.p.z, o[0], o[1], o[2]]), false)
            }
            SensorReading::Dropout => (None, true),
        };
        self.log.push(Record::Sensor {
            t,
            tick: i,
            object: Some(self.world.object(idx).id.clone()),
            reading,
            dropout,
            status: after,
            estimate: estimate.map(|e| pose6(&e)),
            gate_open,
        });
    }

    fn at_rest(&self) -> bool {
        self.plant.qd.amax() < self.cfg.task.settle_speed
    }

    /// The reference has come to rest at the end of the running plan.
    fn plan_finished(&self, t: f64) -> bool {
        self.active.as_ref().is_none_or(|a| {
            let r = reference_at(a, t);
            let end = &a.knots.last().expect("non-empty trajectory").x.q;
            r.qd.amax() < 1e-3 && r.q.iter().zip(end).all(|(q, e)| (q - e).abs() < 1e-4)
        })
    }

    fn tool_pose(&self) -> Pose {
        self.robot.forward_kinematics(self.plant.q.as_slice())
    }

    fn within(&self, a: &Pose, b: &Pose, tol: [f64; 2]) -> bool {
        let (dp, da) = pose_distance(a, b);
        dp <= tol[0] && da <= tol[1]
    }

    /// Grasp pose implied by an object pose, in the symmetric variant nearest `yaw_ref`.
    fn grasp_for(&self, object: &Pose, yaw_ref: f64) -> (Pose, Pose) {
        let idx = self.target.expect("target known while approaching");
        let offset = self.world.object(idx).grasp_offset;
        let (_, grasp) = derive_grasp_targets(object, &offset, &self.spec);
        let grasp = nearest_symmetric(&grasp, yaw_ref);
        (lifted(&grasp, self.spec.pregrasp_offset()), grasp)
    }

    /// Retarget gate between two object poses, evaluated on their grasp
    /// frames: object roll/pitch noise does not move a top-down grasp.
    fn retarget_check(&self, old: &Pose, new: &Pose, yaw_ref: f64) -> (bool, f64, f64) {
        let a = self.grasp_for(old, yaw_ref).1;
        let b = self.grasp_for(new, yaw_ref).1;
        let (dp, da) = pose_distance(&a, &b);
        (retarget_gate(&a, &b, self.spec.retarget_tol), dp, da)
    }

    fn planner_stage(&mut self, i: u64, t: f64) {
        let phase = self.phase;
        let record = move |outcome| Record::Planner {
            t,
            tick: i,
            phase,
            outcome,
            n: 0,
            n_s: 0,
            iterations: 0,
            converged: false,
            cost: 0.0,
            wall_time: None,
            start: None,
            waypoint: None,
            goal: None,
            handover_jump: None,
        };
        if let Some(since) = self.recover_since.filter(|_| self.phase == TaskPhase::Recover) {
            if t - since >= self.cfg.task.recover_timeout - 1e-9 {
                let reason = "tracking not regained".to_string();
                self.emit(Event::RunFailed { reason: reason.clone() });
                self.log.push(record(PlanOutcome::Hold));
                self.finish(Some(RunOutcome::Failed { reason }));
                return;
            }
        }
        let outcome = match self.phase {
            TaskPhase::ApproachGrasp => self.approach_cycle(t),
            TaskPhase::Transfer => self.transfer_cycle(t),
            _ => Err(PlanOutcome::Hold),
        };
        match outcome {
            Ok(()) => self.plan_towards_targets(i, t),
            Err(o) => self.log.push(record(o)),
        }
    }

    /// Updates approach targets; `Err` carries the outcome when no plan is needed.
    fn approach_cycle(&mut self, t: f64) -> Result<(), PlanOutcome> {
        if self.track_updates < self.cfg.task.min_track_measurements || self.tracker.status() != TrackStatus::Tracking {
            return Err(PlanOutcome::Waiting);
        }
        let estimate = self.tracker.estimate_at(t).ok_or(PlanOutcome::Waiting)?;
        let head_q = self.head(t).0.q;
        let tool_yaw = heading(&self.robot.forward_kinematics(&head_q));
        let settled = self.plan_finished(t) && self.at_rest();
        let mut commit = None;
        let previous = self.targets.as_ref().and_then(|tg| tg.object.map(|o| (o, heading(&tg.goal_pose), tg.waypoint_passed)));
        match previous {
            None => {
                let (p, o) = pose_parts(&estimate);
                self.emit(Event::Target { p, o });
                commit = Some((estimate, tool_yaw, false));
            }
            Some((old, yaw_ref, passed)) => {
                let (gate, dp, da) = self.retarget_check(&old, &estimate, yaw_ref);
                let new_grasp = self.grasp_for(&estimate, yaw_ref).1;
                if gate {
                    let (p, o) = pose_parts(&estimate);
                    self.emit(Event::Retarget { p, o, pos_err: dp, ang_err: da });
                    commit = Some((estimate, yaw_ref, false));
                } else if passed && settled && !self.within(&self.tool_pose(), &new_grasp, self.cfg.task.reach_tol) {
                    // Came to rest short of the grasp: re-aim at the latest estimate.
                    self.emit(Event::Refine { pos_err: dp, ang_err: da });
                    commit = Some((estimate, yaw_ref, true));
                }
            }
        }
        if let Some((object, yaw_ref, keep_passed)) = commit {
            let (pre, grasp) = self.grasp_for(&object, yaw_ref);
            let passed = keep_passed && self.targets.as_ref().is_some_and(|tg| tg.waypoint_passed);
            let seed = self.targets.as_ref().map_or(head_q.clone(), |tg| tg.q_waypoint.clone());
            match self.solve_ik(&pre, &grasp, &seed) {
                Ok((q_waypoint, q_goal)) => {
                    self.targets = Some(Targets {
                        object: Some(object),
                        goal_pose: grasp,
                        q_waypoint,
                        q_goal,
                        waypoint_passed: passed,
                    });
                }
                Err(reason) => {
                    self.emit(Event::PlanError { reason });
                    if self.targets.is_none() {
                        return Err(PlanOutcome::Failed);
                    }
                }
            }
        }
        let tg = self.targets.as_ref().expect("targets committed above");
        if commit.is_none() && tg.waypoint_passed && settled {
            let (_, grasp_now) = self.grasp_for(&estimate, heading(&tg.goal_pose));
            if self.within(&self.tool_pose(), &grasp_now, self.cfg.task.reach_tol) {
                self.transition(TaskEvent::ReachedGrasp);
                self.emit(Event::GripperCommand { action: GripperAction::Close, phase: self.phase });
                self.gripper = Gripper::Closing { done: self.tick + self.gripper_ticks() };
                return Err(PlanOutcome::Hold);
            }
        }
        Ok(())
    }

    fn transfer_cycle(&mut self, t: f64) -> Result<(), PlanOutcome> {
        let tg = self.targets.as_ref().ok_or(PlanOutcome::Failed)?;
        if tg.waypoint_passed && self.plan_finished(t) && self.at_rest() {
            let goal = tg.goal_pose;
            if self.within(&self.tool_pose(), &goal, self.cfg.task.reach_tol) {
                self.transition(TaskEvent::ReachedPlace);
                self.emit(Event::GripperCommand { action: GripperAction::Open, phase: self.phase });
                self.gripper = Gripper::Opening { done: self.tick + self.gripper_ticks() };
                return Err(PlanOutcome::Hold);
            }
        }
        Ok(())
    }

    fn gripper_ticks(&self) -> u64 {
        (self.cfg.task.gripper_time / self.dt).round() as u64
    }

    fn gripper_closed(&mut self, t: f64, tool: &Pose) {
        self.gripper = Gripper::Closed;
        let idx = self.target.expect("gripper closes on a detected target");
        let truth = self.world.truth(idx, t);
        let (_, true_grasp) = self.grasp_for(&truth, heading(tool));
        let captured = self.within(tool, &true_grasp, self.cfg.task.capture_tol);
        if captured {
            self.world.attach(idx, t, *tool);
        }
        self.emit(Event::GripperClosed { captured });
        self.transition(TaskEvent::GripperClosed);
        // The object is carried at the offset seen by the filter at grasp time.
        let estimate = self.tracker.estimate_at(t).unwrap_or(truth);
        let rel = tool.inverse().compose(&estimate);
        let place = self.spec.place_pose.compose(&rel.inverse());
        let goal = top_down(place.p, heading(&place));
        let pre = lifted(&goal, self.spec.pregrasp_offset());
        let seed = self.plant.q.as_slice().to_vec();
        match self.solve_ik(&pre, &goal, &seed) {
            Ok((q_waypoint, q_goal)) => {
                self.targets = Some(Targets {
                    object: None,
                    goal_pose: goal,
                    q_waypoint,
                    q_goal,
                    waypoint_passed: false,
                })
            }
            Err(reason) => {
                self.targets = None;
                self.emit(Event::PlanError { reason });
            }
        }
    }

    fn gripper_opened(&mut self, t: f64) {
        self.gripper = Gripper::Open;
        let idx = self.target.expect("gripper opens on a detected target");
        let held = self.world.is_attached(idx);
        if held {
            self.world.release(idx, t);
        }
        self.emit(Event::GripperOpened);
        self.transition(TaskEvent::GripperOpened);
        let (pos_err, ang_err) = pose_distance(&self.world.truth(idx, t), &self.spec.place_pose);
        let tol = self.cfg.task.place_tol;
        let success = held && pos_err <= tol[0] && ang_err <= tol[1];
        self.emit(Event::Done { success, pos_err, ang_err });
        self.outcome = Some(if success {
            RunOutcome::Success
        } else if held {
            RunOutcome::Failed { reason: "object released outside the place tolerance".into() }
        } else {
            RunOutcome::Failed { reason: "object was not held".into() }
        });
        if self.cfg.task.stop_when_done {
            self.finish(None);
        }
    }

    fn solve_ik(&self, waypoint: &Pose, goal: &Pose, seed: &[f64]) -> Result<(Vec<f64>, Vec<f64>), String> {
        let ik = &self.cfg.planner.ik;
        let qw = self
            .robot
            .inverse_kinematics(&IkTarget::Pose(*waypoint), seed, ik)
            .map_err(|e| format!("waypoint IK: {e}"))?;
        let qg = self
            .robot
            .inverse_kinematics(&IkTarget::Pose(*goal), qw.as_slice(), ik)
            .map_err(|e| format!("goal IK: {e}"))?;
        Ok((qw.as_slice().to_vec(), qg.as_slice().to_vec()))
    }

    /// State at `t + h` on the running trajectory, and the shifted trajectory
    /// whose knot 1 is that state (for warm starting).
    fn head(&self, t: f64) -> (PlanState, Vec<f64>, Option<Trajectory>) {
        let h = self.cfg.planner.h;
        match &self.active {
            Some(tr) => {
                let k = ((t + h - tr.t0) / h).round().max(0.0) as usize;
                if k + 1 >= tr.knots.len() {
                    let last = tr.knots.last().expect("non-empty trajectory");
                    (last.x.clone(), last.u.clone(), None)
                } else {
                    let knot = &tr.knots[k];
                    (knot.x.clone(), knot.u.clone(), Some(tr.shifted(k.saturating_sub(1))))
                }
            }
            None => (PlanState::at_rest(self.q_hold.as_slice().to_vec()), vec![0.0; self.robot.dof()], None),
        }
    }

    fn plan_towards_targets(&mut self, i: u64, t: f64) {
        let h = self.cfg.planner.h;
        let (x0, u0, previous) = self.head(t);
        let p = self.cfg.planner.clone();
        let Some(tg) = self.targets.as_mut() else { return };
        if !tg.waypoint_passed && ToleranceSet::uniform(tg.q_waypoint.clone(), p.waypoint_half_width).contains(&x0.q, 1e-6) {
            tg.waypoint_passed = true;
            let speed = x0.qd.iter().map(|v| v * v).sum::<f64>().sqrt();
            self.emit(Event::WaypointPassed { speed });
        }
        let tg = self.targets.as_ref().expect("checked above");
        let waypoint = (!tg.waypoint_passed).then(|| tg.q_waypoint.clone());
        let goal = tg.q_goal.clone();
        let hz = horizon_lengths(
            &x0.q,
            waypoint.as_deref(),
            &goal,
            &p.horizon_bounds(&self.robot),
            h,
            p.n_min,
            p.n_max,
        );
        let problem = PlanProblem {
            x0,
            u0,
            waypoint: waypoint.clone().map(|w| ToleranceSet::uniform(w, p.waypoint_half_width)),
            goal: ToleranceSet::uniform(goal.clone(), p.goal_half_width),
            enforce_waypoint: hz.waypoint_reachable,
            enforce_goal: hz.goal_reachable,
            h,
            n: hz.n,
            n_s: hz.n_s,
            bounds: p.bounds(&self.robot),
            weights: p.weights,
            obstacles: self.cfg.scene.obstacles.clone(),
            r_safe: p.r_safe,
        };
        let start = t + h;
        let job = PlanJob {
            problem,
            previous,
            start,
            start_tick: i + self.plan_ticks,
            phase: self.phase,
            handover_from: self.active.clone().map(|a| (a, start)),
        };
        match &self.worker {
            Some(w) => {
                w.jobs.put(job);
                self.log.push(Record::Planner {
                    t,
                    tick: i,
                    phase: self.phase,
                    outcome: PlanOutcome::Submitted,
                    n: hz.n,
                    n_s: hz.n_s,
                    iterations: 0,
                    converged: false,
                    cost: 0.0,
                    wall_time: None,
                    start: Some(start),
                    waypoint,
                    goal: Some(goal),
                    handover_jump: None,
                });
            }
            None => {
                let res = run_job(job, &self.robot, &self.solve_opts);
                self.accept_result(res, i);
            }
        }
    }

    fn accept_result(&mut self, res: PlanResult, i: u64) {
        let t = self.time();
        let job = &res.job;
        let wall_time = (self.clock == ClockMode::Realtime).then_some(res.wall_time);
        let base = |outcome, n, n_s| Record::Planner {
            t,
            tick: i,
            phase: job.phase,
            outcome,
            n,
            n_s,
            iterations: 0,
            converged: false,
            cost: 0.0,
            wall_time,
            start: Some(job.start),
            waypoint: job.problem.waypoint.as_ref().map(|w| w.center.clone()),
            goal: Some(job.problem.goal.center.clone()),
            handover_jump: None,
        };
        if job.start_tick < i || job.phase != self.phase {
            let late_by = (i.saturating_sub(job.start_tick)) as f64 * self.dt;
            if job.start_tick < i {
                self.emit(Event::Overrun { stage: Stage::Planner, late_by });
            }
            self.log.push(base(PlanOutcome::Failed, job.problem.n, job.problem.n_s));
            return;
        }
        match res.result {
            Ok(mut traj) => {
                traj.t0 = job.start;
                let jump = job.handover_from.as_ref().map(|(old, at)| {
                    let a = reference_at(old, *at);
                    let b = reference_at(&traj, *at);
                    [max_abs_diff(&a.q, &b.q), max_abs_diff(&a.qd, &b.qd), max_abs_diff(&a.qdd, &b.qdd)]
                });
                let outcome = if traj.stats.relaxed { PlanOutcome::Relaxed } else { PlanOutcome::Planned };
                let mut rec = base(outcome, job.problem.n, job.problem.n_s);
                if let Record::Planner { iterations, converged, cost, handover_jump, .. } = &mut rec {
                    *iterations = traj.stats.iterations;
                    *converged = traj.stats.converged;
                    *cost = traj.stats.cost;
                    *handover_jump = jump;
                }
                self.log.push(rec);
                self.queued = Some((job.start_tick, traj));
            }
            Err(e) => {
                let rec = base(PlanOutcome::Failed, job.problem.n, job.problem.n_s);
                self.emit(Event::PlanError { reason: e.to_string() });
                self.log.push(rec);
            }
        }
    }

    fn controller_stage(&mut self, i: u64, t: f64) {
        let reference = match &self.active {
            Some(tr) => reference_at(tr, t),
            None => ServoReference::hold(self.q_hold.clone()),
        };
        self.q_hold = reference.q.clone();
        let u = feedback_accel(&reference, &self.plant.q, &self.plant.qd, &self.gains);
        let tau = computed_torque(&self.ctrl_model, &self.plant.q, &self.plant.qd, &u);
        if i % self.cfg.telemetry.controller_decimation as u64 == 0 {
            self.log.push(Record::Controller {
                t,
                tick: i,
                q: self.plant.q.as_slice().to_vec(),
                qd: self.plant.qd.as_slice().to_vec(),
                q_ref: reference.q.as_slice().to_vec(),
                tau: tau.as_slice().to_vec(),
            });
        }
        match plant_step(&self.robot, &self.plant, &tau, self.dt) {
            Ok(next) => self.plant = next,
            Err(e) => {
                let reason = format!("plant integration failed: {e}");
                self.emit(Event::RunFailed { reason: reason.clone() });
                self.finish(Some(RunOutcome::Failed { reason }));
            }
        }
    }

    /// Snapshot for the service protocol.
    pub fn scene_state(&self) -> serde_json::Value {
        let t = self.time();
        let objects: serde_json::Map<String, serde_json::Value> = self
            .world
            .objects()
            .enumerate()
            .map(|(k, o)| {
                let (p, r) = pose_parts(&self.world.truth(k, t));
                (o.id.clone(), serde_json::json!({ "p": p, "o": r }))
            })
            .collect();
        // The newest accepted plan, even if it has not taken over yet.
        let latest = self.queued.as_ref().map(|(_, tr)| tr).or(self.active.as_ref());
        let knots: Vec<Vec<f64>> = latest.map(|a| a.knots.iter().map(|k| k.x.q.clone()).collect()).unwrap_or_default();
        serde_json::json!({
            "type": "scene_state",
            "t": t,
            "robot_q": self.plant.q.as_slice(),
            "object_poses": objects,
            "phase": self.phase,
            "plan_knots": knots,
        })
    }
}
