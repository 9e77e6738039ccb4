//! Pick-and-place task phases and their transition table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPhase {
    Idle,
    Detecting,
    ApproachGrasp,
    CloseGripper,
    Transfer,
    OpenGripper,
    Done,
    Recover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskEvent {
    PromptReceived,
    Detected,
    DetectionFailed,
    ReachedGrasp,
    GripperClosed,
    ReachedPlace,
    GripperOpened,
    TrackingLost,
    TrackingRegained,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("event {event:?} is not defined in phase {phase:?}")]
pub struct IllegalEvent {
    pub phase: TaskPhase,
    pub event: TaskEvent,
}

pub fn step_fsm(phase: TaskPhase, event: TaskEvent) -> Result<TaskPhase, IllegalEvent> {
    use TaskEvent as E;
    use TaskPhase as P;
    Ok(match (phase, event) {
        (P::Idle, E::PromptReceived) => P::Detecting,
        (P::Detecting, E::Detected) => P::ApproachGrasp,
        (P::Detecting, E::DetectionFailed) => P::Idle,
        (P::ApproachGrasp, E::ReachedGrasp) => P::CloseGripper,
        (P::ApproachGrasp, E::TrackingLost) => P::Recover,
        (P::Recover, E::TrackingRegained) => P::ApproachGrasp,
        (P::CloseGripper, E::GripperClosed) => P::Transfer,
        (P::Transfer, E::ReachedPlace) => P::OpenGripper,
        (P::OpenGripper, E::GripperOpened) => P::Done,
        _ => return Err(IllegalEvent { phase, event }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const PHASES: [TaskPhase; 8] = [
        TaskPhase::Idle,
        TaskPhase::Detecting,
        TaskPhase::ApproachGrasp,
        TaskPhase::CloseGripper,
        TaskPhase::Transfer,
        TaskPhase::OpenGripper,
        TaskPhase::Done,
        TaskPhase::Recover,
    ];
    const EVENTS: [TaskEvent; 9] = [
        TaskEvent::PromptReceived,
        TaskEvent::Detected,
        TaskEvent::DetectionFailed,
        TaskEvent::ReachedGrasp,
        TaskEvent::GripperClosed,
        TaskEvent::ReachedPlace,
        TaskEvent::GripperOpened,
        TaskEvent::TrackingLost,
        TaskEvent::TrackingRegained,
    ];

    #[test]
    fn documented_edges() {
        assert_eq!(step_fsm(TaskPhase::Idle, TaskEvent::PromptReceived), Ok(TaskPhase::Detecting));
        assert_eq!(step_fsm(TaskPhase::Detecting, TaskEvent::Detected), Ok(TaskPhase::ApproachGrasp));
        assert_eq!(
            step_fsm(TaskPhase::Transfer, TaskEvent::PromptReceived),
            Err(IllegalEvent { phase: TaskPhase::Transfer, event: TaskEvent::PromptReceived })
        );
    }

    #[test]
    fn exactly_nine_edges_and_done_is_terminal() {
        let legal = PHASES
            .iter()
            .flat_map(|p| EVENTS.iter().map(move |e| step_fsm(*p, *e)))
            .filter(Result::is_ok)
            .count();
        assert_eq!(legal, 9);
        assert!(EVENTS.iter().all(|e| step_fsm(TaskPhase::Done, *e).is_err()));
    }

    #[test]
    fn happy_path_reaches_done() {
        let path = [
            TaskEvent::PromptReceived,
            TaskEvent::Detected,
            TaskEvent::TrackingLost,
            TaskEvent::TrackingRegained,
            TaskEvent::ReachedGrasp,
            TaskEvent::GripperClosed,
            TaskEvent::ReachedPlace,
            TaskEvent::GripperOpened,
        ];
        let end = path.iter().try_fold(TaskPhase::Idle, |p, e| step_fsm(p, *e)).unwrap();
        assert_eq!(end, TaskPhase::Done);
    }
}
