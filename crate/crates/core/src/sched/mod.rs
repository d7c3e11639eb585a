//! Per-device timelines and the DAG-TL placement of arriving routines.
//!
//! A slot spans an action's request to its estimated completion. Edges bind
//! to milestones, so a child on an Ack or Start edge may begin inside its
//! parent's slot when the two run on different devices.

mod dagtl;
mod verify;

pub use dagtl::{schedule_routine, schedule_routine_per_action, Placement};
pub use verify::{precedence_graph, verify_safety, verify_serial_equivalence, SerialViolation};

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::routine::{Estimate, EventKind, RoutineDag};

/// Index of a routine instance in its [`Schedule`].
pub type RoutineId = usize;

pub(crate) const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotState {
    Planned,
    Running,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub routine: RoutineId,
    pub action: usize,
    pub start: f64,
    pub end: f64,
    pub state: SlotState,
}

impl Slot {
    /// End as seen at `now`: a running action occupies its device until it is done.
    pub fn effective_end(&self, now: f64) -> f64 {
        if self.state == SlotState::Running {
            self.end.max(now)
        } else {
            self.end
        }
    }
}

/// Slots of one device, ordered by start and pairwise disjoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceTimeline {
    pub device: String,
    slots: Vec<Slot>,
}

impl DeviceTimeline {
    pub fn new(device: &str) -> Self {
        DeviceTimeline { device: device.to_string(), slots: Vec::new() }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Max end over committed slots, 0 when empty.
    pub fn next_free(&self) -> f64 {
        self.slots.iter().map(|s| s.end).fold(0.0, f64::max)
    }

    /// Inserts by start time; among equal starts a new slot goes last.
    pub fn insert(&mut self, slot: Slot) {
        let at = self.slots.partition_point(|s| s.start <= slot.start);
        self.slots.insert(at, slot);
    }

    pub fn position(&self, routine: RoutineId, action: usize) -> Option<usize> {
        self.slots.iter().position(|s| s.routine == routine && s.action == action)
    }

    pub fn remove(&mut self, routine: RoutineId, action: usize) -> Option<Slot> {
        self.position(routine, action).map(|i| self.slots.remove(i))
    }

    fn resort(&mut self) {
        self.slots.sort_by(|a, b| a.start.total_cmp(&b.start));
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timelines {
    devices: BTreeMap<String, DeviceTimeline>,
}

impl Timelines {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn device(&self, id: &str) -> Option<&DeviceTimeline> {
        self.devices.get(id)
    }

    pub fn device_mut(&mut self, id: &str) -> &mut DeviceTimeline {
        self.devices.entry(id.to_string()).or_insert_with(|| DeviceTimeline::new(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &DeviceTimeline> {
        self.devices.values()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut DeviceTimeline> {
        self.devices.values_mut()
    }

    pub fn insert(&mut self, device: &str, slot: Slot) {
        self.device_mut(device).insert(slot);
    }

    pub fn slot_count(&self) -> usize {
        self.devices.values().map(|d| d.slots.len()).sum()
    }

    /// JSON lines `{device, action, routine, start, end}`.
    pub fn dump_json_lines(&self, names: impl Fn(RoutineId, usize) -> (String, String)) -> String {
        let mut out = String::new();
        for tl in self.iter() {
            for s in &tl.slots {
                let (routine, action) = names(s.routine, s.action);
                let row = serde_json::json!({
                    "device": tl.device, "action": action, "routine": routine, "start": s.start, "end": s.end,
                });
                out.push_str(&row.to_string());
                out.push('\n');
            }
        }
        out
    }

    /// Gantt rows `device,routine,action,start,end`.
    pub fn gantt_csv(&self, names: impl Fn(RoutineId, usize) -> (String, String)) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["device", "routine", "action", "start", "end"]).expect("in-memory csv");
        for tl in self.iter() {
            for s in &tl.slots {
                let (routine, action) = names(s.routine, s.action);
                w.write_record([tl.device.clone(), routine, action, s.start.to_string(), s.end.to_string()])
                    .expect("in-memory csv");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

/// A routine instance known to the scheduler.
#[derive(Debug, Clone)]
pub struct RoutineEntry {
    pub name: String,
    pub dag: Arc<RoutineDag>,
    pub estimates: Vec<Estimate>,
    pub arrival: f64,
    fired: Vec<[Option<f64>; 4]>,
    dead: Vec<bool>,
    topo_pos: Vec<usize>,
}

impl RoutineEntry {
    pub fn fired(&self, action: usize, kind: EventKind) -> Option<f64> {
        self.fired[action][kind_slot(kind)]
    }

    pub fn is_dead(&self, action: usize) -> bool {
        self.dead[action]
    }

    pub fn topo_pos(&self, action: usize) -> usize {
        self.topo_pos[action]
    }

    pub fn len_of(&self, action: usize) -> f64 {
        self.estimates[action].len()
    }

    /// All actions finished or dead.
    pub fn is_finished(&self) -> bool {
        (0..self.dag.len()).all(|i| {
            self.dead[i] || self.fired[i][kind_slot(EventKind::Complete)].is_some() || self.fired[i][kind_slot(EventKind::Failure)].is_some()
        })
    }
}

fn kind_slot(kind: EventKind) -> usize {
    match kind {
        EventKind::Ack => 0,
        EventKind::Start => 1,
        EventKind::Complete => 2,
        EventKind::Failure => 3,
    }
}

/// Timelines plus the routines that own their slots.
#[derive(Debug, Clone, Default)]
pub struct Schedule {
    pub timelines: Timelines,
    routines: Vec<RoutineEntry>,
}

impl Schedule {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a routine; estimates default to the ones in the document.
    pub fn add_routine(&mut self, name: &str, dag: Arc<RoutineDag>, estimates: Option<Vec<Estimate>>, arrival: f64) -> RoutineId {
        let n = dag.len();
        let estimates = estimates.unwrap_or_else(|| {
            dag.actions().iter().map(|a| a.estimate.unwrap_or(Estimate::fixed(1.0))).collect()
        });
        assert_eq!(estimates.len(), n, "one estimate per action");
        let mut topo_pos = vec![0; n];
        for (p, &i) in dag.topo_order().iter().enumerate() {
            topo_pos[i] = p;
        }
        self.routines.push(RoutineEntry {
            name: name.to_string(),
            dag,
            estimates,
            arrival,
            fired: vec![[None; 4]; n],
            dead: vec![false; n],
            topo_pos,
        });
        self.routines.len() - 1
    }

    pub fn routine(&self, id: RoutineId) -> &RoutineEntry {
        &self.routines[id]
    }

    pub fn routines(&self) -> &[RoutineEntry] {
        &self.routines
    }

    pub fn arrivals(&self) -> Vec<f64> {
        self.routines.iter().map(|r| r.arrival).collect()
    }

    /// Arrived by `now` and not finished.
    pub fn active_routines(&self, now: f64) -> Vec<RoutineId> {
        (0..self.routines.len()).filter(|&r| self.routines[r].arrival <= now && !self.routines[r].is_finished()).collect()
    }

    pub fn device_of(&self, id: RoutineId, action: usize) -> &str {
        &self.routines[id].dag.action(action).device
    }

    pub fn slot(&self, id: RoutineId, action: usize) -> Option<&Slot> {
        let tl = self.timelines.device(self.device_of(id, action))?;
        tl.position(id, action).map(|i| &tl.slots[i])
    }

    pub(crate) fn slot_mut(&mut self, id: RoutineId, action: usize) -> Option<&mut Slot> {
        let dev = self.routines[id].dag.action(action).device.clone();
        let tl = self.timelines.device_mut(&dev);
        let i = tl.position(id, action)?;
        Some(&mut tl.slots[i])
    }

    pub fn is_started(&self, id: RoutineId, action: usize) -> bool {
        self.slot(id, action).is_some_and(|s| s.state != SlotState::Planned)
    }

    /// Earliest time `action` may be requested given its parents, with
    /// `pos` overriding parent slots that are not committed yet.
    ///
    /// A group with a fired member is bound by its earliest firing; otherwise
    /// every member is assumed to be needed.
    pub(crate) fn dependency_time(
        &self,
        id: RoutineId,
        action: usize,
        now: f64,
        pos: &dyn Fn(usize) -> Option<(f64, f64)>,
    ) -> f64 {
        let r = &self.routines[id];
        let mut t = now;
        for group in r.dag.groups(action) {
            let mut fired_min: Option<f64> = None;
            let mut planned_max = f64::NEG_INFINITY;
            for &e in group {
                let edge = r.dag.edge(e);
                if let Some(f) = r.fired(edge.parent, edge.on) {
                    fired_min = Some(fired_min.map_or(f, |m: f64| m.min(f)));
                    continue;
                }
                planned_max = planned_max.max(self.milestone_estimate(id, edge.parent, edge.on, now, pos));
            }
            t = t.max(fired_min.unwrap_or(planned_max));
        }
        t
    }

    /// Expected time of `kind` on `action`, which has not fired yet.
    pub(crate) fn milestone_estimate(
        &self,
        id: RoutineId,
        action: usize,
        kind: EventKind,
        now: f64,
        pos: &dyn Fn(usize) -> Option<(f64, f64)>,
    ) -> f64 {
        let r = &self.routines[id];
        let (start, end, running) = match pos(action) {
            Some((s, e)) => (s, e, false),
            None => match self.slot(id, action) {
                Some(s) => (s.start, s.end, s.state != SlotState::Planned),
                None => return now,
            },
        };
        let t = match kind {
            EventKind::Complete | EventKind::Failure => end,
            k => (start + r.estimates[action].offset(k)).min(end),
        };
        if running {
            t.max(now)
        } else {
            t
        }
    }

    /// Records a dispatch at `now`. Later than planned pushes what follows.
    pub fn start_action(&mut self, id: RoutineId, action: usize, now: f64) {
        let len = self.routines[id].len_of(action);
        let Some(s) = self.slot_mut(id, action) else { return };
        let late = now > s.start + TIME_EPS;
        s.state = SlotState::Running;
        s.start = now;
        s.end = now + len;
        if late {
            self.push_repair(now);
        }
    }

    /// Records a milestone. Terminal ones close the slot at `now`.
    pub fn record(&mut self, id: RoutineId, action: usize, kind: EventKind, now: f64) {
        let k = kind_slot(kind);
        if self.routines[id].fired[action][k].is_some() {
            return;
        }
        self.routines[id].fired[action][k] = Some(now);
        if kind.is_terminal() {
            let mut extended = false;
            if let Some(s) = self.slot_mut(id, action) {
                extended = now > s.end + TIME_EPS;
                s.end = now.max(s.start);
                s.state = SlotState::Done;
            }
            if extended {
                self.push_repair(now);
            }
        }
    }

    /// Drops an action that can no longer run.
    pub fn release(&mut self, id: RoutineId, action: usize) {
        self.routines[id].dead[action] = true;
        let dev = self.device_of(id, action).to_string();
        if let Some(tl) = self.timelines.devices.get_mut(&dev) {
            tl.remove(id, action);
        }
    }

    /// Moves running ends and extends a late running slot to `new_end`.
    pub fn extend_running(&mut self, id: RoutineId, action: usize, new_end: f64, now: f64) {
        if let Some(s) = self.slot_mut(id, action) {
            if s.state == SlotState::Running && new_end > s.end {
                s.end = new_end;
            }
        }
        self.push_repair(now);
    }

    /// Not-started slots as `(routine, action)`, by start then routine then topological position.
    pub(crate) fn planned_in_order(&self) -> Vec<(RoutineId, usize)> {
        let mut v: Vec<(f64, RoutineId, usize, usize)> = self
            .timelines
            .iter()
            .flat_map(|tl| tl.slots.iter())
            .filter(|s| s.state == SlotState::Planned)
            .map(|s| (s.start, s.routine, self.routines[s.routine].topo_pos[s.action], s.action))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        v.into_iter().map(|(_, r, _, a)| (r, a)).collect()
    }

    /// Earliest start for a planned slot keeping its place on the device:
    /// after its dependencies, its device predecessor and `now`.
    pub(crate) fn earliest_in_place(&self, id: RoutineId, action: usize, now: f64) -> f64 {
        let dev = self.device_of(id, action);
        let tl = self.timelines.device(dev).expect("slot exists");
        let i = tl.position(id, action).expect("slot exists");
        let pred_end = if i > 0 { tl.slots[i - 1].effective_end(now) } else { now };
        self.dependency_time(id, action, now, &|_| None).max(pred_end).max(now)
    }

    pub(crate) fn set_end(&mut self, id: RoutineId, action: usize, end: f64) {
        if let Some(s) = self.slot_mut(id, action) {
            s.end = end;
        }
    }

    pub(crate) fn move_slot(&mut self, id: RoutineId, action: usize, start: f64) {
        let len = self.routines[id].len_of(action);
        if let Some(s) = self.slot_mut(id, action) {
            s.start = start;
            s.end = start + len;
        }
    }

    /// Pushes planned slots later where running work, dependencies or
    /// device predecessors now overlap them. Never moves anything earlier.
    pub fn push_repair(&mut self, now: f64) {
        for (r, a) in self.planned_in_order() {
            let cur = self.slot(r, a).expect("planned slot").start;
            let t = self.earliest_in_place(r, a, now);
            if t > cur + TIME_EPS {
                self.move_slot(r, a, t);
            }
        }
        for tl in self.timelines.iter_mut() {
            tl.resort();
        }
    }

    /// Per-device order consistent with the routines' slots, as postsets:
    /// `postsets[r]` holds every routine with a slot after one of `r`'s on
    /// a shared device.
    pub fn postsets(&self) -> BTreeMap<RoutineId, BTreeSet<RoutineId>> {
        let mut out: BTreeMap<RoutineId, BTreeSet<RoutineId>> = (0..self.routines.len()).map(|r| (r, BTreeSet::new())).collect();
        for tl in self.timelines.iter() {
            let mut seen: Vec<RoutineId> = Vec::new();
            for s in &tl.slots {
                for &p in &seen {
                    if p != s.routine {
                        out.get_mut(&p).expect("known routine").insert(s.routine);
                    }
                }
                if !seen.contains(&s.routine) {
                    seen.push(s.routine);
                }
            }
        }
        out
    }

    pub fn devices_of(&self, id: RoutineId) -> BTreeSet<String> {
        self.routines[id].dag.devices().into_iter().map(str::to_string).collect()
    }
}
