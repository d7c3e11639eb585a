use std::collections::BTreeSet;

use super::verify::precedence_graph;
use super::{RoutineId, Schedule, Slot, SlotState, TIME_EPS};

/// Where a routine's actions landed and how much searching it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    /// Planned request time per action; `None` for dead actions.
    pub starts: Vec<Option<f64>>,
    /// Whole-DAG restarts after a serialization conflict.
    pub shifts: u32,
    /// Tentative single-action placements tried.
    pub attempts: u32,
    /// Rejected placements plus backtracking steps.
    pub retries: u32,
}

/// Occupied interval on a device; `None` marks the routine being placed.
type Busy = (f64, f64, Option<RoutineId>);

fn busy_on(s: &Schedule, id: RoutineId, device: &str, now: f64, pos: &[Option<(f64, f64)>]) -> Vec<Busy> {
    let mut iv: Vec<Busy> = s
        .timelines
        .device(device)
        .map(|tl| tl.slots().iter().map(|x| (x.start, x.effective_end(now), Some(x.routine))).collect())
        .unwrap_or_default();
    let r = s.routine(id);
    for (a, p) in pos.iter().enumerate() {
        if let Some((st, en)) = p {
            if r.dag.action(a).device == device {
                iv.push((*st, *en, None));
            }
        }
    }
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    iv
}

/// Earliest `t >= from` with `[t, t + len)` free.
fn first_fit(iv: &[Busy], from: f64, len: f64) -> f64 {
    let mut t = from;
    for &(s, e, _) in iv {
        if e <= t + TIME_EPS {
            continue;
        }
        if s >= t + len - TIME_EPS {
            break;
        }
        t = t.max(e);
    }
    t
}

/// One candidate start per gap that fits, ending with the open end.
fn candidates(iv: &[Busy], from: f64, len: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = from;
    loop {
        let c = first_fit(iv, t, len);
        out.push(c);
        match iv.iter().find(|x| x.0 >= c + len - TIME_EPS) {
            Some(next) => t = next.1,
            None => return out,
        }
    }
}

/// Nearest other routines before and after `[start, start + len)`.
fn neighbours(iv: &[Busy], start: f64, len: f64) -> (Option<RoutineId>, Option<RoutineId>) {
    let before = iv.iter().filter(|x| x.2.is_some() && x.1 <= start + TIME_EPS).max_by(|a, b| a.0.total_cmp(&b.0));
    let after = iv.iter().filter(|x| x.2.is_some() && x.0 >= start + len - TIME_EPS).min_by(|a, b| a.0.total_cmp(&b.0));
    (before.and_then(|x| x.2), after.and_then(|x| x.2))
}

/// True when some successor reaches some predecessor, closing a cycle through the new routine.
fn closes_cycle(graph: &[BTreeSet<RoutineId>], preds: &BTreeSet<RoutineId>, succs: &BTreeSet<RoutineId>) -> bool {
    let mut seen = vec![false; graph.len()];
    let mut stack: Vec<RoutineId> = succs.iter().copied().collect();
    while let Some(x) = stack.pop() {
        if preds.contains(&x) {
            return true;
        }
        if std::mem::replace(&mut seen[x], true) {
            continue;
        }
        stack.extend(graph[x].iter().copied());
    }
    false
}

fn ancestors(graph: &[BTreeSet<RoutineId>], of: &BTreeSet<RoutineId>) -> BTreeSet<RoutineId> {
    let mut rev = vec![Vec::new(); graph.len()];
    for (x, outs) in graph.iter().enumerate() {
        for &y in outs {
            rev[y].push(x);
        }
    }
    let mut out = of.clone();
    let mut stack: Vec<RoutineId> = of.iter().copied().collect();
    while let Some(x) = stack.pop() {
        for &p in &rev[x] {
            if out.insert(p) {
                stack.push(p);
            }
        }
    }
    out
}

fn commit(s: &mut Schedule, id: RoutineId, pos: &[Option<(f64, f64)>]) {
    for (a, p) in pos.iter().enumerate() {
        if let Some((start, end)) = *p {
            let dev = s.device_of(id, a).to_string();
            s.timelines.insert(&dev, Slot { routine: id, action: a, start, end, state: SlotState::Planned });
        }
    }
}

fn live_order(s: &Schedule, id: RoutineId) -> Vec<usize> {
    let r = s.routine(id);
    r.dag.topo_order().iter().copied().filter(|&a| !r.is_dead(a)).collect()
}

/// Places routine `id` with whole-DAG backtracking.
///
/// Actions go breadth-first into the earliest gap after their dependencies.
/// When a placement would order some routine both before and after `id`,
/// the whole routine restarts no earlier than the latest end, on its own
/// devices, of every routine that must precede it. If that bound does not
/// move, it restarts after everything on its devices, which cannot conflict.
pub fn schedule_routine(s: &mut Schedule, id: RoutineId, now: f64) -> Placement {
    let graph = precedence_graph(&s.timelines, s.routines().len());
    let n = s.routine(id).dag.len();
    let devices = s.devices_of(id);
    let order = live_order(s, id);
    let mut floor = now;
    let mut shifts = 0;
    let mut attempts = 0;
    'restart: loop {
        let mut pos: Vec<Option<(f64, f64)>> = vec![None; n];
        let mut preds = BTreeSet::new();
        let mut succs = BTreeSet::new();
        for &a in &order {
            attempts += 1;
            let dep = s.dependency_time(id, a, now, &|p| pos[p]).max(floor);
            let len = s.routine(id).len_of(a);
            let iv = busy_on(s, id, s.device_of(id, a), now, &pos);
            let start = first_fit(&iv, dep, len);
            let (b, f) = neighbours(&iv, start, len);
            preds.extend(b);
            succs.extend(f);
            pos[a] = Some((start, start + len));
            if closes_cycle(&graph, &preds, &succs) {
                let must_precede = ancestors(&graph, &preds);
                let end_of = |only: Option<&BTreeSet<RoutineId>>| {
                    devices
                        .iter()
                        .filter_map(|d| s.timelines.device(d))
                        .flat_map(|tl| tl.slots().iter())
                        .filter(|x| only.is_none_or(|set| set.contains(&x.routine)))
                        .map(|x| x.effective_end(now))
                        .fold(f64::NEG_INFINITY, f64::max)
                };
                let mut t = end_of(Some(&must_precede));
                if t <= floor + TIME_EPS {
                    t = end_of(None);
                }
                debug_assert!(t > floor, "shift bound must advance");
                floor = t.max(floor + TIME_EPS);
                shifts += 1;
                continue 'restart;
            }
        }
        commit(s, id, &pos);
        return Placement { starts: pos.iter().map(|p| p.map(|x| x.0)).collect(), shifts, attempts, retries: shifts };
    }
}

/// Action-by-action backtracking over gaps, kept as a comparator for the
/// whole-DAG strategy. Exponential in the worst case.
pub fn schedule_routine_per_action(s: &mut Schedule, id: RoutineId, now: f64) -> Placement {
    let graph = precedence_graph(&s.timelines, s.routines().len());
    let n = s.routine(id).dag.len();
    let order = live_order(s, id);
    let mut pos: Vec<Option<(f64, f64)>> = vec![None; n];
    let mut choice = vec![0usize; order.len()];
    let mut depth = 0;
    let (mut attempts, mut retries) = (0, 0);
    while depth < order.len() {
        let a = order[depth];
        let dep = s.dependency_time(id, a, now, &|p| pos[p]);
        let len = s.routine(id).len_of(a);
        let iv = busy_on(s, id, s.device_of(id, a), now, &pos);
        let cands = candidates(&iv, dep, len);
        if choice[depth] >= cands.len() {
            // The open-end candidate never conflicts once every earlier action
            // also sits at its open end, so this never unwinds past the root.
            choice[depth] = 0;
            depth -= 1;
            pos[order[depth]] = None;
            choice[depth] += 1;
            retries += 1;
            continue;
        }
        attempts += 1;
        let start = cands[choice[depth]];
        pos[a] = Some((start, start + len));
        let mut preds = BTreeSet::new();
        let mut succs = BTreeSet::new();
        for &b in &order[..=depth] {
            let (st, en) = pos[b].expect("placed");
            let others: Vec<Busy> =
                busy_on(s, id, s.device_of(id, b), now, &vec![None; n]).into_iter().filter(|x| x.2.is_some()).collect();
            let (p, f) = neighbours(&others, st, en - st);
            preds.extend(p);
            succs.extend(f);
        }
        if closes_cycle(&graph, &preds, &succs) {
            pos[a] = None;
            choice[depth] += 1;
            retries += 1;
            continue;
        }
        depth += 1;
    }
    commit(s, id, &pos);
    Placement { starts: pos.iter().map(|p| p.map(|x| x.0)).collect(), shifts: 0, attempts, retries }
}
