//! Rescheduling after actions finish earlier or later than planned.
//!
//! Both policies keep each device's relative order between routines as the
//! frozen serialization order dictates, so safety and serial equivalence
//! survive every step.

mod baseline;
mod rv;
mod stf;

pub use baseline::{baseline_schedulers, Admission, BaselinePolicy};
pub use rv::reschedule_rv;
pub use stf::reschedule_stf;

#[cfg(test)]
mod props;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sched::{RoutineId, Schedule, SlotState, TIME_EPS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReschedError {
    #[error("postsets are cyclic through routines {0:?}")]
    CyclicPostsets(Vec<RoutineId>),
    #[error("deviating action {routine}/{action} has no slot")]
    NoSlot { routine: RoutineId, action: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationKind {
    Early,
    Late,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub routine: RoutineId,
    pub action: usize,
    pub kind: DeviationKind,
    /// Signed change of the estimated end; negative when early.
    pub dt: f64,
    pub detected_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReschedConfig {
    /// Early completions closer than this to the plan are ignored.
    pub reactive_threshold: f64,
    /// Fraction of the upper bound after which a running action is re-estimated.
    pub proactive_fraction: f64,
}

impl Default for ReschedConfig {
    fn default() -> Self {
        ReschedConfig { reactive_threshold: 1.0, proactive_fraction: 0.95 }
    }
}

impl Deviation {
    /// Early deviation when `actual` beats `planned_end` by more than the threshold.
    pub fn early(routine: RoutineId, action: usize, planned_end: f64, actual: f64, cfg: &ReschedConfig) -> Option<Self> {
        (planned_end - actual > cfg.reactive_threshold).then_some(Deviation {
            routine,
            action,
            kind: DeviationKind::Early,
            dt: actual - planned_end,
            detected_at: actual,
        })
    }

    pub fn late(routine: RoutineId, action: usize, dt: f64, detected_at: f64) -> Self {
        Deviation { routine, action, kind: DeviationKind::Late, dt: dt.max(0.0), detected_at }
    }
}

/// Extra time a running action needs beyond its scheduled length.
///
/// With progress `p` the total is extrapolated as `elapsed / p`; without it
/// the action is assumed to run to its upper bound plus the detection window.
pub fn late_dt(elapsed: f64, progress: Option<f64>, scheduled_len: f64, u: f64, q_w: f64) -> f64 {
    let total = match progress {
        Some(p) if p > 0.0 && p < 1.0 => elapsed / p,
        _ => u + q_w,
    };
    (total - scheduled_len).max(0.0)
}

/// Potentially impacted actions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ImpactedSet {
    pub actions: BTreeSet<(RoutineId, usize)>,
}

impl ImpactedSet {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Total order over active routines, frozen from the plan's postsets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SerializationOrder {
    pub order: Vec<RoutineId>,
    pub postsets: BTreeMap<RoutineId, BTreeSet<RoutineId>>,
}

impl SerializationOrder {
    pub fn position(&self, r: RoutineId) -> Option<usize> {
        self.order.iter().position(|&x| x == r)
    }

    pub fn precedes(&self, a: RoutineId, b: RoutineId) -> bool {
        matches!((self.position(a), self.position(b)), (Some(x), Some(y)) if x < y)
    }

    /// Routine ids mapped to their position; absent ones sort last.
    pub(crate) fn rank(&self) -> BTreeMap<RoutineId, usize> {
        self.order.iter().enumerate().map(|(i, &r)| (r, i)).collect()
    }
}

/// Repeatedly takes the routines with empty postsets, puts them in front
/// of what is already ordered (ties by arrival, then id) and removes them
/// from the remaining postsets.
///
/// The result places every routine before all routines in its postset.
pub fn freeze_order(
    postsets: &BTreeMap<RoutineId, BTreeSet<RoutineId>>,
    arrivals: &BTreeMap<RoutineId, f64>,
) -> Result<Vec<RoutineId>, ReschedError> {
    let mut remaining: BTreeMap<RoutineId, BTreeSet<RoutineId>> = postsets
        .iter()
        .map(|(r, p)| (*r, p.iter().copied().filter(|x| postsets.contains_key(x) && x != r).collect()))
        .collect();
    let mut order: Vec<RoutineId> = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let mut front: Vec<RoutineId> = remaining.iter().filter(|(_, p)| p.is_empty()).map(|(r, _)| *r).collect();
        if front.is_empty() {
            return Err(ReschedError::CyclicPostsets(remaining.keys().copied().collect()));
        }
        let at = |r: &RoutineId| arrivals.get(r).copied().unwrap_or(f64::INFINITY);
        front.sort_by(|a, b| at(a).total_cmp(&at(b)).then(a.cmp(b)));
        for r in &front {
            remaining.remove(r);
        }
        for p in remaining.values_mut() {
            for r in &front {
                p.remove(r);
            }
        }
        front.extend(order);
        order = front;
    }
    Ok(order)
}

/// Order frozen from the whole plan, executed and planned, restricted to
/// routines active at `now`.
pub fn current_order(s: &Schedule, now: f64) -> Result<SerializationOrder, ReschedError> {
    let postsets = s.postsets();
    let arrivals: BTreeMap<RoutineId, f64> = s.arrivals().into_iter().enumerate().collect();
    let full = freeze_order(&postsets, &arrivals)?;
    let active: BTreeSet<RoutineId> = s.active_routines(now).into_iter().collect();
    Ok(SerializationOrder {
        order: full.into_iter().filter(|r| active.contains(r)).collect(),
        postsets: postsets.into_iter().filter(|(r, _)| active.contains(r)).collect(),
    })
}

/// Actions that (i) descend from the deviating action, (ii) follow it on its
/// device, or (iii) belong to a routine serialized after its routine.
/// Started and dead actions are excluded.
pub fn impacted_set(dev: &Deviation, s: &Schedule, order: &SerializationOrder) -> ImpactedSet {
    let mut out = BTreeSet::new();
    let r = dev.routine;
    let entry = s.routine(r);
    let planned = |rid: RoutineId, a: usize| s.slot(rid, a).is_some_and(|x| x.state == SlotState::Planned);
    for d in entry.dag.descendants(dev.action) {
        if planned(r, d) {
            out.insert((r, d));
        }
    }
    let device = s.device_of(r, dev.action);
    if let Some(tl) = s.timelines.device(device) {
        if let Some(i) = tl.position(r, dev.action) {
            for x in &tl.slots()[i + 1..] {
                if x.state == SlotState::Planned {
                    out.insert((x.routine, x.action));
                }
            }
        }
    }
    if let Some(p) = order.position(r) {
        for &later in &order.order[p + 1..] {
            for a in 0..s.routine(later).dag.len() {
                if planned(later, a) {
                    out.insert((later, a));
                }
            }
        }
    }
    out.remove(&(r, dev.action));
    ImpactedSet { actions: out }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReschedPolicy {
    Stf,
    Rv,
}

/// One rescheduler invocation, for the audit log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    pub t: f64,
    pub trigger: String,
    pub kind: DeviationKind,
    pub impacted: usize,
    pub policy: ReschedPolicy,
    pub elapsed_compute: f64,
}

/// Applies `dev` to its own slot, then reschedules the rest with `policy`.
/// Returns the number of impacted actions.
pub fn reschedule(policy: ReschedPolicy, dev: &Deviation, s: &mut Schedule, now: f64) -> Result<usize, ReschedError> {
    let slot = *s.slot(dev.routine, dev.action).ok_or(ReschedError::NoSlot { routine: dev.routine, action: dev.action })?;
    if dev.kind == DeviationKind::Late && slot.state == SlotState::Running {
        s.set_end(dev.routine, dev.action, slot.end + dev.dt);
    }
    let order = current_order(s, now)?;
    let impacted = impacted_set(dev, s, &order);
    match policy {
        ReschedPolicy::Stf => {
            reschedule_stf(&impacted, s, &order, now);
        }
        ReschedPolicy::Rv => reschedule_rv(dev, s, now),
    }
    debug_assert!(crate::sched::verify_safety(&s.timelines));
    Ok(impacted.len())
}

pub(crate) fn sum_ends(s: &Schedule, set: &BTreeSet<(RoutineId, usize)>) -> f64 {
    set.iter().filter_map(|&(r, a)| s.slot(r, a)).map(|x| x.end).sum()
}

pub(crate) const EPS: f64 = TIME_EPS;
