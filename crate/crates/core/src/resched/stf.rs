use std::collections::{BTreeMap, BTreeSet};

use super::{sum_ends, ImpactedSet, SerializationOrder, EPS};
use crate::sched::{RoutineId, Schedule, Slot, SlotState};

type Key = (RoutineId, usize);

/// List scheduling of the impacted actions, earliest start then shortest.
///
/// The impacted actions, closed as in [`close_under_descendants`], are taken off their
/// devices and appended after each device's remaining slots. For routines
/// `R` before `R'` in the order that share a device, every descheduled
/// action of `R` there precedes every descheduled action of `R'` there. If
/// the result finishes the descheduled actions later in total than simply
/// pushing the old plan, the pushed plan is kept. Returns whether the new
/// placement was used.
pub fn reschedule_stf(impacted: &ImpactedSet, s: &mut Schedule, order: &SerializationOrder, now: f64) -> bool {
    let set = close_under_descendants(impacted, s);
    if set.is_empty() {
        s.push_repair(now);
        return false;
    }
    let mut shifted = s.clone();
    shifted.push_repair(now);
    let shift_sum = sum_ends(&shifted, &set);

    for &(r, a) in &set {
        let dev = s.device_of(r, a).to_string();
        s.timelines.device_mut(&dev).remove(r, a);
    }
    let mut next_free: BTreeMap<String, f64> = BTreeMap::new();
    for &(r, a) in &set {
        let dev = s.device_of(r, a).to_string();
        let nf = s.timelines.device(&dev).map_or(now, |tl| tl.slots().iter().map(|x| x.effective_end(now)).fold(now, f64::max));
        next_free.insert(dev, nf);
    }

    let rank = order.rank();
    let rank_of = |r: RoutineId| rank.get(&r).copied().unwrap_or(usize::MAX);
    let mut dag_preds: BTreeMap<Key, BTreeSet<Key>> = set.iter().map(|&k| (k, BTreeSet::new())).collect();
    let mut serial_preds: BTreeMap<Key, BTreeSet<Key>> = set.iter().map(|&k| (k, BTreeSet::new())).collect();
    for &(r, a) in &set {
        for e in s.routine(r).dag.parents(a) {
            if set.contains(&(r, e.parent)) {
                dag_preds.get_mut(&(r, a)).expect("member").insert((r, e.parent));
            }
        }
    }
    let mut by_device: BTreeMap<&str, BTreeMap<(usize, RoutineId), Vec<usize>>> = BTreeMap::new();
    for &(r, a) in &set {
        by_device.entry(s.device_of(r, a)).or_default().entry((rank_of(r), r)).or_default().push(a);
    }
    for groups in by_device.values() {
        let gs: Vec<(&(usize, RoutineId), &Vec<usize>)> = groups.iter().collect();
        for w in gs.windows(2) {
            let (r0, acts0) = (w[0].0 .1, w[0].1);
            let (r1, acts1) = (w[1].0 .1, w[1].1);
            for &b in acts1 {
                serial_preds.get_mut(&(r1, b)).expect("member").extend(acts0.iter().map(|&a| (r0, a)));
            }
        }
    }
    let mut succs: BTreeMap<Key, Vec<Key>> = BTreeMap::new();
    let mut indeg: BTreeMap<Key, usize> = BTreeMap::new();
    for &k in &set {
        let preds: BTreeSet<Key> = dag_preds[&k].union(&serial_preds[&k]).copied().collect();
        indeg.insert(k, preds.len());
        for p in preds {
            succs.entry(p).or_default().push(k);
        }
    }

    let mut placed: BTreeMap<Key, (f64, f64)> = BTreeMap::new();
    let mut ready: BTreeSet<Key> = indeg.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    while !ready.is_empty() {
        let cand = |k: &Key| -> f64 {
            let (r, a) = *k;
            let dep = s.dependency_time(r, a, now, &|p| placed.get(&(r, p)).copied());
            let fin = serial_preds[k].iter().map(|p| placed[p].1).fold(now, f64::max);
            dep.max(fin).max(next_free[s.device_of(r, a)])
        };
        let (start, k) = ready
            .iter()
            .map(|k| (cand(k), s.routine(k.0).len_of(k.1), rank_of(k.0), *k))
            .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.cmp(&y.2)).then(x.3.cmp(&y.3)))
            .map(|x| (x.0, x.3))
            .expect("ready is non-empty");
        ready.remove(&k);
        let end = start + s.routine(k.0).len_of(k.1);
        let dev = s.device_of(k.0, k.1).to_string();
        s.timelines.insert(&dev, Slot { routine: k.0, action: k.1, start, end, state: SlotState::Planned });
        next_free.insert(dev, end);
        placed.insert(k, (start, end));
        for &c in succs.get(&k).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indeg.get_mut(&c).expect("member");
            *d -= 1;
            if *d == 0 {
                ready.insert(c);
            }
        }
    }
    debug_assert_eq!(placed.len(), set.len(), "precedence among impacted actions is acyclic");

    if sum_ends(s, &set) > shift_sum + EPS {
        *s = shifted;
        return false;
    }
    true
}

/// The impacted set closed under planned descendants and under planned
/// slots that follow a member on its device. Appending the set after the
/// fixed slots then cannot invert any device order.
pub(crate) fn close_under_descendants(impacted: &ImpactedSet, s: &Schedule) -> BTreeSet<Key> {
    let mut set = BTreeSet::new();
    let mut stack: Vec<Key> = impacted.actions.iter().copied().collect();
    while let Some((r, a)) = stack.pop() {
        if !set.insert((r, a)) {
            continue;
        }
        for d in s.routine(r).dag.descendants(a) {
            if s.slot(r, d).is_some_and(|x| x.state == SlotState::Planned) {
                stack.push((r, d));
            }
        }
        let tl = s.timelines.device(s.device_of(r, a)).expect("slot exists");
        if let Some(i) = tl.position(r, a) {
            stack.extend(tl.slots()[i + 1..].iter().filter(|x| x.state == SlotState::Planned).map(|x| (x.routine, x.action)));
        }
    }
    set
}
