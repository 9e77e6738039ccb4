//! Ground truth of the scene objects over time.
//!
//! Each object carries a timeline of segments (its configured motion, held
//! poses set by an operator, intervals attached to the gripper), so the
//! delayed sensor can ask where an object was in the recent past.

use std::collections::VecDeque;

use crate::geom::Pose;
use crate::perception::{Motion, SceneObject};

#[derive(Debug, Clone)]
enum Segment {
    Free { from: f64, initial: Pose, motion: Motion, t_base: f64 },
    Attached { from: f64, rel: Pose },
}

impl Segment {
    fn from(&self) -> f64 {
        match self {
            Segment::Free { from, .. } | Segment::Attached { from, .. } => *from,
        }
    }
}

#[derive(Debug, Clone)]
struct Tracked {
    object: SceneObject,
    segments: Vec<Segment>,
}

#[derive(Debug, Clone)]
pub struct World {
    objects: Vec<Tracked>,
    /// Tool poses while something is held, oldest first.
    tool_history: VecDeque<(f64, Pose)>,
    history_span: f64,
}

impl World {
    /// `history_span` bounds how far back attached poses are remembered.
    pub fn new(objects: &[SceneObject], history_span: f64) -> Self {
        let objects = objects
            .iter()
            .map(|o| Tracked {
                object: o.clone(),
                segments: vec![Segment::Free {
                    from: f64::NEG_INFINITY,
                    initial: o.initial_pose,
                    motion: o.motion.clone(),
                    t_base: 0.0,
                }],
            })
            .collect();
        Self { objects, tool_history: VecDeque::new(), history_span }
    }

    pub fn objects(&self) -> impl Iterator<Item = &SceneObject> + '_ {
        self.objects.iter().map(|o| &o.object)
    }

    pub fn scene(&self) -> Vec<SceneObject> {
        self.objects().cloned().collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.object.id == id)
    }

    pub fn object(&self, idx: usize) -> &SceneObject {
        &self.objects[idx].object
    }

    pub fn is_attached(&self, idx: usize) -> bool {
        matches!(self.objects[idx].segments.last(), Some(Segment::Attached { .. }))
    }

    fn any_attached(&self) -> bool {
        (0..self.objects.len()).any(|i| self.is_attached(i))
    }

    fn tool_at(&self, t: f64) -> Pose {
        let idx = self.tool_history.partition_point(|(s, _)| *s <= t);
        self.tool_history[idx.saturating_sub(1)].1
    }

    /// True pose of object `idx` at time `t`.
    pub fn truth(&self, idx: usize, t: f64) -> Pose {
        let segs = &self.objects[idx].segments;
        let k = segs.partition_point(|s| s.from() <= t).saturating_sub(1);
        match &segs[k] {
            Segment::Free { initial, motion, t_base, .. } => motion.pose_at(initial, t - t_base),
            Segment::Attached { rel, .. } => self.tool_at(t).compose(rel),
        }
    }

    /// Records the tool pose at `t`; only needed while an object is held.
    pub fn record_tool(&mut self, t: f64, tool: Pose) {
        if !self.any_attached() {
            self.tool_history.clear();
            return;
        }
        self.tool_history.push_back((t, tool));
        while self.tool_history.len() > 2 && self.tool_history[1].0 < t - self.history_span {
            self.tool_history.pop_front();
        }
    }

    /// Rigidly attaches object `idx` to the tool from time `t`.
    pub fn attach(&mut self, idx: usize, t: f64, tool: Pose) {
        let rel = tool.inverse().compose(&self.truth(idx, t));
        self.objects[idx].segments.push(Segment::Attached { from: t, rel });
        self.tool_history.push_back((t, tool));
    }

    /// Holds object `idx` at `pose` from time `t` on (also used for release).
    pub fn hold_at(&mut self, idx: usize, t: f64, pose: Pose) {
        self.objects[idx].segments.push(Segment::Free { from: t, initial: pose, motion: Motion::Static, t_base: t });
    }

    pub fn release(&mut self, idx: usize, t: f64) {
        let pose = self.truth(idx, t);
        self.hold_at(idx, t, pose);
    }
}
