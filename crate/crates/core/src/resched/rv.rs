use super::{Deviation, DeviationKind, EPS};
use crate::sched::{Schedule, SlotState};

/// Push then reclaim.
///
/// A late deviation first moves every not-started slot that starts at or
/// after the deviating one by `dt`. Then, in start order, each of those
/// slots is pulled back to the earliest time its dependencies, its device
/// predecessor and `now` allow. Device order never changes, and no slot ends
/// up later than the pushed schedule put it (unless it was already overdue).
pub fn reschedule_rv(dev: &Deviation, s: &mut Schedule, now: f64) {
    let Some(origin) = s.slot(dev.routine, dev.action).map(|x| x.start) else { return };
    let set: Vec<(usize, usize)> = s
        .planned_in_order()
        .into_iter()
        .filter(|&(r, a)| s.slot(r, a).is_some_and(|x| x.state == SlotState::Planned && x.start >= origin - EPS))
        .collect();
    if dev.kind == DeviationKind::Late && dev.dt > 0.0 {
        for &(r, a) in &set {
            let st = s.slot(r, a).expect("planned slot").start;
            s.move_slot(r, a, st + dev.dt);
        }
    }
    for &(r, a) in &set {
        let t = s.earliest_in_place(r, a, now);
        s.move_slot(r, a, t);
    }
    s.push_repair(now);
}
