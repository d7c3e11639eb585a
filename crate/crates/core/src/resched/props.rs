use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;

use super::stf::close_under_descendants;
use super::*;
use crate::routine::{Edge, EventKind, RoutineDag};
use crate::sched::tests::act;
use crate::sched::{schedule_routine, verify_safety, verify_serial_equivalence, Schedule, SlotState};

const DEVICES: [&str; 3] = ["d0", "d1", "d2"];

/// Per action: device index, length, and the edge from the previous action
/// (0 none, 1 Ack, 2 Start, 3 Complete).
type Shape = Vec<(usize, f64, u8)>;

fn shapes() -> impl Strategy<Value = Vec<Shape>> {
    prop::collection::vec(prop::collection::vec((0..3usize, 0.5..10.0f64, 0..4u8), 1..=4), 2..=5)
}

fn dag(name: &str, shape: &Shape) -> Arc<RoutineDag> {
    let actions = shape.iter().enumerate().map(|(i, (d, l, _))| act(&format!("{name}{i}"), DEVICES[*d], *l)).collect();
    let edges = shape
        .iter()
        .enumerate()
        .skip(1)
        .filter_map(|(i, (_, _, e))| {
            let on = match e {
                1 => EventKind::Ack,
                2 => EventKind::Start,
                3 => EventKind::Complete,
                _ => return None,
            };
            Some(Edge { parent: i - 1, child: i, on })
        })
        .collect();
    Arc::new(RoutineDag::new(name, None, actions, edges).unwrap())
}

fn planned(shapes: &[Shape], arrivals: &[f64]) -> Schedule {
    let mut s = Schedule::new();
    for (i, (sh, at)) in shapes.iter().zip(arrivals).enumerate() {
        let id = s.add_routine(&format!("r{i}"), dag(&format!("r{i}"), sh), None, *at);
        schedule_routine(&mut s, id, *at);
    }
    s
}

/// Routine sequence on every device respects `order` among its members.
fn respects(s: &Schedule, order: &SerializationOrder) -> bool {
    let rank = order.rank();
    s.timelines.iter().all(|tl| {
        let ranks: Vec<usize> = tl.slots().iter().filter_map(|x| rank.get(&x.routine).copied()).collect();
        ranks.windows(2).all(|w| w[0] <= w[1])
    })
}

/// Runs the earliest slot and deviates it at a fraction of its length.
/// Every other slot planned before that moment is started, and completed
/// if its end has passed, so nothing is overdue.
fn deviate(s: &mut Schedule, late: bool, amount: f64, frac: f64) -> Option<(Deviation, f64)> {
    let first = s.timelines.iter().flat_map(|t| t.slots()).min_by(|a, b| a.start.total_cmp(&b.start).then(a.routine.cmp(&b.routine)))?;
    let (r, a, start, end) = (first.routine, first.action, first.start, first.end);
    let now = start + frac * (end - start);
    s.start_action(r, a, start);
    for (r2, a2) in s.planned_in_order() {
        let x = *s.slot(r2, a2).unwrap();
        if x.start < now {
            s.start_action(r2, a2, x.start);
            if x.end <= now {
                s.record(r2, a2, EventKind::Complete, x.end);
            }
        }
    }
    if late {
        Some((Deviation::late(r, a, amount, now), now))
    } else {
        s.record(r, a, EventKind::Complete, now);
        Deviation::early(r, a, end, now, &ReschedConfig::default()).map(|d| (d, now))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn planning_is_safe_and_serial(sh in shapes(), gaps in prop::collection::vec(0.0..5.0f64, 5)) {
        let arrivals: Vec<f64> = gaps.iter().scan(0.0, |t, g| { *t += g; Some(*t) }).take(sh.len()).collect();
        let s = planned(&sh, &arrivals);
        prop_assert!(verify_safety(&s.timelines));
        let ids: Vec<_> = (0..sh.len()).collect();
        prop_assert!(verify_serial_equivalence(&s.timelines, &ids).is_ok());
    }

    #[test]
    fn rescheduling_keeps_safety_and_the_frozen_order(
        sh in shapes(), late in any::<bool>(), amount in 0.0..20.0f64, frac in 0.0..1.0f64, stf in any::<bool>(),
    ) {
        let mut s = planned(&sh, &vec![0.0; sh.len()]);
        let Some((dev, now)) = deviate(&mut s, late, amount, frac) else { return Ok(()) };
        let before = current_order(&s, now).unwrap();
        let policy = if stf { ReschedPolicy::Stf } else { ReschedPolicy::Rv };
        reschedule(policy, &dev, &mut s, now).unwrap();
        prop_assert!(verify_safety(&s.timelines));
        prop_assert!(respects(&s, &before));
        let active = s.active_routines(now);
        let witness = verify_serial_equivalence(&s.timelines, &active);
        prop_assert!(witness.is_ok());
    }

    #[test]
    fn rv_never_starts_later_than_the_pushed_plan(sh in shapes(), amount in 0.0..20.0f64, frac in 0.0..1.0f64) {
        let mut s = planned(&sh, &vec![0.0; sh.len()]);
        let Some((dev, now)) = deviate(&mut s, true, amount, frac) else { return Ok(()) };
        let origin = s.slot(dev.routine, dev.action).unwrap().start;
        let pushed: BTreeMap<(usize, usize), f64> = s
            .timelines
            .iter()
            .flat_map(|t| t.slots())
            .filter(|x| x.state == SlotState::Planned)
            .map(|x| ((x.routine, x.action), if x.start >= origin - EPS { x.start + dev.dt } else { x.start }.max(now)))
            .collect();
        reschedule(ReschedPolicy::Rv, &dev, &mut s, now).unwrap();
        for ((r, a), p) in pushed {
            let got = s.slot(r, a).unwrap().start;
            prop_assert!(got <= p + 1e-6, "{r}/{a} at {got}, pushed plan had {p}");
        }
    }

    #[test]
    fn stf_finishes_no_later_than_shifting(
        sh in shapes(), late in any::<bool>(), amount in 0.0..20.0f64, frac in 0.0..1.0f64,
    ) {
        let mut s = planned(&sh, &vec![0.0; sh.len()]);
        let Some((dev, now)) = deviate(&mut s, late, amount, frac) else { return Ok(()) };
        if dev.kind == DeviationKind::Late {
            let end = s.slot(dev.routine, dev.action).unwrap().end;
            s.set_end(dev.routine, dev.action, end + dev.dt);
        }
        let order = current_order(&s, now).unwrap();
        let impacted = impacted_set(&dev, &s, &order);
        let closed = close_under_descendants(&impacted, &s);
        let mut shifted = s.clone();
        shifted.push_repair(now);
        reschedule_stf(&impacted, &mut s, &order, now);
        prop_assert!(sum_ends(&s, &closed) <= sum_ends(&shifted, &closed) + 1e-6);
        prop_assert!(verify_safety(&s.timelines));
    }

    #[test]
    fn frozen_order_extends_postsets(seq in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(), pairs in prop::collection::vec((0..6usize, 0..6usize), 0..12)) {
        // Postsets consistent with `seq`: only later routines appear.
        let pos = |r: usize| seq.iter().position(|&x| x == r).unwrap();
        let mut postsets: BTreeMap<usize, BTreeSet<usize>> = (0..6).map(|r| (r, BTreeSet::new())).collect();
        for (a, b) in pairs {
            if pos(a) < pos(b) {
                postsets.get_mut(&a).unwrap().insert(b);
            }
        }
        let arrivals: BTreeMap<usize, f64> = (0..6).map(|r| (r, r as f64)).collect();
        let order = freeze_order(&postsets, &arrivals).unwrap();
        let at = |r: usize| order.iter().position(|&x| x == r).unwrap();
        prop_assert_eq!(order.len(), 6);
        for (r, p) in &postsets {
            for q in p {
                prop_assert!(at(*r) < at(*q));
            }
        }
    }
}
