use std::collections::BTreeSet;

use serde::Serialize;

use super::{RoutineId, Timelines, TIME_EPS};

/// Routines that are ordered both ways by the device sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SerialViolation {
    pub cycle: Vec<RoutineId>,
}

/// `graph[r]` holds the routines that directly follow `r` on some device.
pub fn precedence_graph(timelines: &Timelines, routines: usize) -> Vec<BTreeSet<RoutineId>> {
    let mut g = vec![BTreeSet::new(); routines];
    for tl in timelines.iter() {
        for w in tl.slots().windows(2) {
            let (a, b) = (w[0].routine, w[1].routine);
            if a != b {
                g[a].insert(b);
            }
        }
    }
    g
}

/// True iff no device has overlapping slots.
pub fn verify_safety(timelines: &Timelines) -> bool {
    timelines.iter().all(|tl| tl.slots().windows(2).all(|w| w[0].end <= w[1].start + TIME_EPS && w[0].start <= w[1].start))
}

/// A serial order of `routines` consistent with every device's slot
/// sequence, ties broken by routine id, or a cycle proving none exists.
pub fn verify_serial_equivalence(timelines: &Timelines, routines: &[RoutineId]) -> Result<Vec<RoutineId>, SerialViolation> {
    let n = timelines.iter().flat_map(|t| t.slots()).map(|s| s.routine + 1).chain(routines.iter().map(|r| r + 1)).max().unwrap_or(0);
    let g = precedence_graph(timelines, n);
    let mut nodes: BTreeSet<RoutineId> = routines.iter().copied().collect();
    nodes.extend(timelines.iter().flat_map(|t| t.slots()).map(|s| s.routine));
    let mut indeg = vec![0usize; n];
    for outs in &g {
        for &b in outs {
            indeg[b] += 1;
        }
    }
    let mut ready: BTreeSet<RoutineId> = nodes.iter().copied().filter(|&r| indeg[r] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(r) = ready.pop_first() {
        order.push(r);
        for &b in &g[r] {
            indeg[b] -= 1;
            if indeg[b] == 0 {
                ready.insert(b);
            }
        }
    }
    if order.len() == nodes.len() {
        return Ok(order);
    }
    Err(SerialViolation { cycle: find_cycle(&g, &indeg) })
}

/// A cycle among the nodes Kahn's pass could not release.
fn find_cycle(g: &[BTreeSet<RoutineId>], indeg: &[usize]) -> Vec<RoutineId> {
    let stuck = |r: RoutineId| indeg[r] > 0;
    let Some(start) = (0..g.len()).find(|&r| stuck(r)) else { return Vec::new() };
    // Walk backwards-safe: every stuck node has a stuck successor or a stuck
    // predecessor; follow stuck successors until a node repeats.
    let mut path = vec![start];
    let mut at = start;
    loop {
        let next = g[at].iter().copied().find(|&b| stuck(b) && reaches(g, b, at, &stuck));
        let Some(next) = next else { return path };
        if let Some(i) = path.iter().position(|&p| p == next) {
            return path[i..].to_vec();
        }
        path.push(next);
        at = next;
    }
}

fn reaches(g: &[BTreeSet<RoutineId>], from: RoutineId, to: RoutineId, keep: &dyn Fn(RoutineId) -> bool) -> bool {
    let mut seen = vec![false; g.len()];
    let mut stack = vec![from];
    while let Some(x) = stack.pop() {
        if x == to {
            return true;
        }
        if std::mem::replace(&mut seen[x], true) {
            continue;
        }
        stack.extend(g[x].iter().copied().filter(|&y| keep(y)));
    }
    false
}

#[cfg(test)]
mod tests {
    use super::super::{Slot, SlotState};
    use super::*;

    fn slot(routine: RoutineId, start: f64, end: f64) -> Slot {
        Slot { routine, action: 0, start, end, state: SlotState::Planned }
    }

    #[test]
    fn empty_timelines_are_safe() {
        assert!(verify_safety(&Timelines::new()));
        assert_eq!(verify_serial_equivalence(&Timelines::new(), &[]).unwrap(), Vec::<RoutineId>::new());
    }

    #[test]
    fn overlap_is_unsafe() {
        let mut t = Timelines::new();
        t.insert("d", slot(0, 0.0, 2.0));
        t.insert("d", slot(1, 1.0, 3.0));
        assert!(!verify_safety(&t));
    }

    #[test]
    fn disjoint_devices_admit_any_order() {
        let mut t = Timelines::new();
        t.insert("d1", slot(0, 0.0, 2.0));
        t.insert("d2", slot(1, 0.0, 2.0));
        assert_eq!(verify_serial_equivalence(&t, &[0, 1]).unwrap(), vec![0, 1]);
        assert!(precedence_graph(&t, 2).iter().all(|s| s.is_empty()));
    }

    #[test]
    fn crossing_orders_form_a_cycle() {
        let mut t = Timelines::new();
        t.insert("d1", slot(0, 0.0, 1.0));
        t.insert("d1", slot(1, 1.0, 2.0));
        t.insert("d2", slot(1, 0.0, 1.0));
        t.insert("d2", slot(0, 1.0, 2.0));
        let v = verify_serial_equivalence(&t, &[0, 1]).unwrap_err();
        let mut c = v.cycle.clone();
        c.sort();
        assert_eq!(c, vec![0, 1]);
    }
}
