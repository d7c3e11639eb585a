//! Per-action lifecycle: Request, Ack, Start, Complete, or Failure.
//!
//! An [`ActionInstance`] is a pure state machine. Callers feed it acks, poll
//! results or pushed updates together with the current time; it answers with
//! the milestone events it detected and the time of its next poll.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pollplan::{post_u_plan, PostUDecision, PostUState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LifecycleError {
    #[error("device {device} is busy with {action}")]
    DeviceBusy { device: String, action: String },
    #[error("milestone {0} was never detected")]
    NotDetected(EventKind),
    #[error("invalid lifecycle configuration: {0}")]
    InvalidConfig(String),
}

/// Milestone events delivered to routine logic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Ack,
    Start,
    Complete,
    Failure,
}

impl EventKind {
    pub fn is_terminal(self) -> bool {
        matches!(self, EventKind::Complete | EventKind::Failure)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Ack => "ack",
            EventKind::Start => "start",
            EventKind::Complete => "complete",
            EventKind::Failure => "failure",
        })
    }
}

/// Wire form `{t, action_id, kind}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub t: f64,
    pub action_id: String,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionState {
    AckWait,
    StartDetection,
    CompleteDetection,
    Completed,
    Failed,
}

impl ActionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, ActionState::Completed | ActionState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

/// Snapshot of a device's reported attributes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceState(pub BTreeMap<String, StateValue>);

impl DeviceState {
    pub fn with(mut self, field: &str, value: StateValue) -> Self {
        self.0.insert(field.to_string(), value);
        self
    }

    pub fn get(&self, field: &str) -> Option<&StateValue> {
        self.0.get(field)
    }

    pub fn number(&self, field: &str) -> Option<f64> {
        match self.0.get(field)? {
            StateValue::Number(v) => Some(*v),
            _ => None,
        }
    }
}

/// Condition over device attributes that marks a milestone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Predicate {
    Eq { field: String, value: StateValue },
    Ne { field: String, value: StateValue },
    In { field: String, values: Vec<StateValue> },
    Ge { field: String, value: f64 },
    Gt { field: String, value: f64 },
    Le { field: String, value: f64 },
    Lt { field: String, value: f64 },
    All { of: Vec<Predicate> },
    Any { of: Vec<Predicate> },
}

impl Predicate {
    pub fn eval(&self, s: &DeviceState) -> bool {
        let num = |f: &str| s.number(f);
        match self {
            Predicate::Eq { field, value } => s.get(field) == Some(value),
            Predicate::Ne { field, value } => s.get(field).is_some_and(|v| v != value),
            Predicate::In { field, values } => s.get(field).is_some_and(|v| values.contains(v)),
            Predicate::Ge { field, value } => num(field).is_some_and(|v| v >= *value),
            Predicate::Gt { field, value } => num(field).is_some_and(|v| v > *value),
            Predicate::Le { field, value } => num(field).is_some_and(|v| v <= *value),
            Predicate::Lt { field, value } => num(field).is_some_and(|v| v < *value),
            Predicate::All { of } => of.iter().all(|p| p.eval(s)),
            Predicate::Any { of } => of.iter().any(|p| p.eval(s)),
        }
    }
}

/// Maps device attributes to Start and Complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilestoneMap {
    pub start: Predicate,
    pub complete: Predicate,
    /// Numeric attribute in `[0, 1]` reporting physical progress.
    #[serde(default)]
    pub progress_field: Option<String>,
}

impl MilestoneMap {
    /// `status` is `running` while acting and `done` afterwards.
    pub fn status_field() -> Self {
        let text = |s: &str| StateValue::Text(s.to_string());
        MilestoneMap {
            start: Predicate::In { field: "status".into(), values: vec![text("running"), text("done")] },
            complete: Predicate::Eq { field: "status".into(), value: text("done") },
            progress_field: Some("progress".into()),
        }
    }
}

/// Planned poll offsets for one phase, measured from the phase origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub polls: Vec<f64>,
    pub u: f64,
}

impl PhasePlan {
    pub fn new(polls: Vec<f64>, u: f64) -> Result<Self, LifecycleError> {
        let ok = !polls.is_empty()
            && polls[0] > 0.0
            && polls.windows(2).all(|w| w[1] > w[0])
            && u > 0.0
            && u.is_finite();
        if !ok {
            return Err(LifecycleError::InvalidConfig("phase plan needs increasing positive polls".into()));
        }
        Ok(PhasePlan { polls, u })
    }
}

/// How milestones reach the hub.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detection {
    Polling {
        ack_to_start: PhasePlan,
        start_to_complete: PhasePlan,
        /// First post-U backoff gap.
        base_gap: f64,
    },
    /// The device reports changes itself; only the phase deadlines are tracked.
    Push { u_ack_to_start: f64, u_start_to_complete: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub requested: f64,
    pub ack: Option<f64>,
    pub start: Option<f64>,
    pub complete: Option<f64>,
    pub failure: Option<f64>,
}

impl Timestamps {
    pub fn get(&self, kind: EventKind) -> Option<f64> {
        match kind {
            EventKind::Ack => self.ack,
            EventKind::Start => self.start,
            EventKind::Complete => self.complete,
            EventKind::Failure => self.failure,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionInstance {
    pub id: String,
    pub device: String,
    pub action: String,
    state: ActionState,
    q_w: f64,
    milestones: MilestoneMap,
    detection: Detection,
    timestamps: Timestamps,
    polls_issued: u32,
    origin: f64,
    next_index: usize,
    next_poll: Option<f64>,
    post_u: Option<PostUState>,
    last_progress: Option<f64>,
}

impl ActionInstance {
    /// Creates the instance at request time; it waits for the ack for at most `q_w`.
    pub fn new(
        id: &str,
        device: &str,
        action: &str,
        q_w: f64,
        milestones: MilestoneMap,
        detection: Detection,
        now: f64,
    ) -> Result<Self, LifecycleError> {
        if !(q_w > 0.0 && q_w.is_finite()) {
            return Err(LifecycleError::InvalidConfig(format!("Q_w must be positive, got {q_w}")));
        }
        Ok(ActionInstance {
            id: id.to_string(),
            device: device.to_string(),
            action: action.to_string(),
            state: ActionState::AckWait,
            q_w,
            milestones,
            detection,
            timestamps: Timestamps { requested: now, ..Timestamps::default() },
            polls_issued: 0,
            origin: now,
            next_index: 0,
            next_poll: None,
            post_u: None,
            last_progress: None,
        })
    }

    pub fn state(&self) -> ActionState {
        self.state
    }

    pub fn timestamps(&self) -> &Timestamps {
        &self.timestamps
    }

    pub fn polls_issued(&self) -> u32 {
        self.polls_issued
    }

    pub fn q_w(&self) -> f64 {
        self.q_w
    }

    pub fn is_push(&self) -> bool {
        matches!(self.detection, Detection::Push { .. })
    }

    /// Time by which the ack must arrive.
    pub fn ack_deadline(&self) -> f64 {
        self.timestamps.requested + self.q_w
    }

    pub fn next_poll_at(&self) -> Option<f64> {
        self.next_poll
    }

    /// Deadline of the current phase for push devices.
    pub fn push_deadline(&self) -> Option<f64> {
        let Detection::Push { u_ack_to_start, u_start_to_complete } = self.detection else {
            return None;
        };
        match self.state {
            ActionState::StartDetection => Some(self.origin + u_ack_to_start + self.q_w),
            ActionState::CompleteDetection => Some(self.origin + u_start_to_complete + self.q_w),
            _ => None,
        }
    }

    fn event(&self, kind: EventKind, t: f64) -> ProgressEvent {
        ProgressEvent { t, action_id: self.id.clone(), kind }
    }

    fn fail(&mut self, now: f64) -> Vec<ProgressEvent> {
        self.state = ActionState::Failed;
        self.timestamps.failure = Some(now);
        self.next_poll = None;
        vec![self.event(EventKind::Failure, now)]
    }

    pub fn on_ack(&mut self, now: f64) -> Vec<ProgressEvent> {
        if self.state != ActionState::AckWait {
            return Vec::new();
        }
        self.timestamps.ack = Some(now);
        self.state = ActionState::StartDetection;
        self.begin_phase(now);
        vec![self.event(EventKind::Ack, now)]
    }

    /// Declares failure if the ack is still missing at its deadline.
    pub fn on_ack_timeout(&mut self, now: f64) -> Vec<ProgressEvent> {
        if self.state == ActionState::AckWait && now >= self.ack_deadline() - 1e-9 {
            self.fail(now)
        } else {
            Vec::new()
        }
    }

    /// Declares failure for a push device whose phase deadline passed.
    pub fn on_deadline(&mut self, now: f64) -> Vec<ProgressEvent> {
        match self.push_deadline() {
            Some(d) if now >= d - 1e-9 => self.fail(now),
            _ => Vec::new(),
        }
    }

    fn plan(&self) -> Option<&PhasePlan> {
        match (&self.detection, self.state) {
            (Detection::Polling { ack_to_start, .. }, ActionState::StartDetection) => Some(ack_to_start),
            (Detection::Polling { start_to_complete, .. }, ActionState::CompleteDetection) => Some(start_to_complete),
            _ => None,
        }
    }

    fn begin_phase(&mut self, now: f64) {
        self.origin = now;
        self.last_progress = None;
        self.next_index = 0;
        self.post_u = None;
        self.next_poll = None;
        if let Some(first) = self.plan().map(|p| p.polls[0]) {
            self.next_poll = Some(now + first);
            self.next_index = 1;
        }
    }

    /// Matches an observation against the milestone map.
    fn observe(&mut self, obs: &DeviceState, now: f64) -> Vec<ProgressEvent> {
        let complete = self.milestones.complete.eval(obs);
        match self.state {
            ActionState::StartDetection if complete => {
                self.timestamps.start = Some(now);
                self.timestamps.complete = Some(now);
                self.state = ActionState::Completed;
                self.next_poll = None;
                vec![self.event(EventKind::Start, now), self.event(EventKind::Complete, now)]
            }
            ActionState::StartDetection if self.milestones.start.eval(obs) => {
                self.timestamps.start = Some(now);
                self.state = ActionState::CompleteDetection;
                self.begin_phase(now);
                vec![self.event(EventKind::Start, now)]
            }
            ActionState::CompleteDetection if complete => {
                self.timestamps.complete = Some(now);
                self.state = ActionState::Completed;
                self.next_poll = None;
                vec![self.event(EventKind::Complete, now)]
            }
            _ => Vec::new(),
        }
    }

    /// Handles the result of a poll issued at `now`.
    pub fn on_poll_result(&mut self, obs: &DeviceState, now: f64) -> Vec<ProgressEvent> {
        if !matches!(self.state, ActionState::StartDetection | ActionState::CompleteDetection) {
            return Vec::new();
        }
        self.polls_issued += 1;
        let before = self.state;
        let events = self.observe(obs, now);
        if !events.is_empty() || self.state != before {
            return events;
        }
        let prior = self.last_progress;
        let current = self.progress(obs);
        let events = self.advance(now, prior, current);
        if let Some(p) = current {
            self.last_progress = Some(prior.map_or(p, |l| l.max(p)));
        }
        events
    }

    fn progress(&self, obs: &DeviceState) -> Option<f64> {
        self.milestones.progress_field.as_ref().and_then(|f| obs.number(f))
    }

    /// Handles an update pushed by the device.
    pub fn on_push_update(&mut self, obs: &DeviceState, now: f64) -> Vec<ProgressEvent> {
        if !matches!(self.state, ActionState::StartDetection | ActionState::CompleteDetection) {
            return Vec::new();
        }
        self.observe(obs, now)
    }

    fn advance(&mut self, now: f64, prior: Option<f64>, progress: Option<f64>) -> Vec<ProgressEvent> {
        let (polls, u) = match self.plan() {
            Some(p) => (p.polls.clone(), p.u),
            None => return Vec::new(),
        };
        while self.next_index < polls.len() {
            let at = self.origin + polls[self.next_index];
            self.next_index += 1;
            if at > now + 1e-12 {
                self.next_poll = Some(at);
                return Vec::new();
            }
        }
        let base_gap = match &self.detection {
            Detection::Polling { base_gap, .. } => *base_gap,
            Detection::Push { .. } => self.q_w,
        };
        let q_w = self.q_w;
        let state = self.post_u.get_or_insert_with(|| PostUState::new(u, q_w, base_gap, prior));
        match post_u_plan(state, now - self.origin, progress) {
            PostUDecision::PollAfter(gap) => {
                self.next_poll = Some(now + gap);
                Vec::new()
            }
            PostUDecision::FailureDeclared => self.fail(now),
        }
    }
}

/// Tracks which device is executing which action at the hub.
#[derive(Debug, Clone, Default)]
pub struct InFlight {
    by_device: BTreeMap<String, String>,
}

impl InFlight {
    /// Reserves `device` for `action_id`; fails if another action holds it.
    pub fn request_action(&mut self, device: &str, action_id: &str) -> Result<(), LifecycleError> {
        match self.by_device.get(device) {
            Some(holder) if holder != action_id => Err(LifecycleError::DeviceBusy {
                device: device.to_string(),
                action: holder.clone(),
            }),
            _ => {
                self.by_device.insert(device.to_string(), action_id.to_string());
                Ok(())
            }
        }
    }

    pub fn release(&mut self, device: &str) {
        self.by_device.remove(device);
    }

    pub fn holder(&self, device: &str) -> Option<&str> {
        self.by_device.get(device).map(String::as_str)
    }
}

/// Delay between the true milestone time and its detection.
pub fn detection_time(instance: &ActionInstance, kind: EventKind, ground_truth: f64) -> Result<f64, LifecycleError> {
    let seen = instance.timestamps().get(kind).ok_or(LifecycleError::NotDetected(kind))?;
    Ok((seen - ground_truth).max(0.0))
}
