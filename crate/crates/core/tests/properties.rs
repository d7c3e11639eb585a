use std::collections::BTreeMap;

use proptest::prelude::*;
use rasc::dist::{wasserstein, EmpiricalDistribution, FitConfig};
use rasc::lifecycle::{ActionInstance, DeviceState, Detection, EventKind, MilestoneMap, PhasePlan, StateValue};
use rasc::pollplan::{find_polls, solve_recurrence, PollPlanRequest};
use rasc::sim::{
    office_devices, random_routines, run, ArrivalProcess, BusyPolicy, PolicyConfig, PollingPolicy, RoutineGen, SchedulingPolicy, SimTrace, WorkloadSpec,
};

fn samples() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(0.0..50.0f64, 3..200),
        // Clustered values stress narrow supports.
        (1.0..100.0f64, prop::collection::vec(-0.5..0.5f64, 3..100)).prop_map(|(c, v)| v.into_iter().map(|x| (c + x).max(0.0)).collect()),
    ]
}

fn config() -> impl Strategy<Value = FitConfig> {
    prop_oneof![Just(FitConfig::default()), Just(FitConfig::smoothed()), Just(FitConfig::drift_aware()), (4..128usize).prop_map(|b| FitConfig::default().with_bins(b))]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fitted_density_is_a_distribution(s in samples(), cfg in config(), probes in prop::collection::vec(0.0..1.2f64, 10)) {
        let d = EmpiricalDistribution::fit(&s, cfg).unwrap();
        let dens = d.density().unwrap();
        let end = dens.support_end();
        let w = dens.bin_width();

        // The density is linear between bin centres, so the trapezoid rule
        // over edges and centres is exact.
        let mut xs: Vec<f64> = dens.bin_edges();
        xs.extend((0..dens.bin_count()).map(|j| (j as f64 + 0.5) * w));
        xs.sort_by(f64::total_cmp);
        let area: f64 = xs.windows(2).map(|p| (p[1] - p[0]) * (dens.pdf(p[0]) + dens.pdf(p[1])) / 2.0).sum();
        prop_assert!((area - 1.0).abs() < 1e-6, "area {area}");

        prop_assert!(dens.cdf(0.0).abs() < 1e-12);
        prop_assert!((dens.cdf(end) - 1.0).abs() < 1e-9);
        let mut ts: Vec<f64> = probes.iter().map(|p| p * end).collect();
        ts.sort_by(f64::total_cmp);
        for pair in ts.windows(2) {
            prop_assert!(dens.cdf(pair[0]) <= dens.cdf(pair[1]) + 1e-12);
        }
        for &t in &ts {
            prop_assert!(dens.pdf(t) >= 0.0);
            if t <= end {
                let back = dens.ppf(dens.cdf(t));
                prop_assert!((dens.cdf(back) - dens.cdf(t)).abs() < 1e-9);
                // Where the cdf is flat every point of the flat stretch is a valid inverse.
                if dens.pdf(t) > 0.0 {
                    prop_assert!((back - t).abs() <= w + 1e-9, "ppf(cdf({t})) = {back}, width {w}");
                }
            }
        }
    }

    #[test]
    fn wasserstein_is_a_symmetric_non_negative_distance(a in samples(), b in samples()) {
        let da = EmpiricalDistribution::fit(&a, FitConfig::default()).unwrap();
        let db = EmpiricalDistribution::fit(&b, FitConfig::default()).unwrap();
        let ab = wasserstein(&da, &db).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - wasserstein(&db, &da).unwrap()).abs() < 1e-9);
        prop_assert!(wasserstein(&da, &da).unwrap() < 1e-9);
    }

    #[test]
    fn found_plans_respect_spacing_and_coverage(
        s in samples(), q_frac in 0.02..0.5f64, slo in 0.5..1.0f64, strict in any::<bool>(), min_frac in 0.0..0.5f64,
    ) {
        let d = EmpiricalDistribution::fit(&s, FitConfig::smoothed()).unwrap();
        let u = d.ppf(0.99).unwrap().max(1e-3);
        let q_w = q_frac * u;
        let slo = if strict { 1.0 } else { slo };
        let min_gap = min_frac * q_w;
        let plan = find_polls(&PollPlanRequest::new(d.density().unwrap(), u, q_w, slo).min_poll_interval(min_gap)).unwrap();
        let mut prev = 0.0;
        for &p in &plan.polls {
            prop_assert!(p - prev >= min_gap - 1e-9, "gap {} below {min_gap}", p - prev);
            if strict {
                prop_assert!(p - prev <= q_w + 1e-9, "gap {} above Q_w {q_w}", p - prev);
            }
            prev = p;
        }
        prop_assert!(plan.coverage.unwrap() >= slo - 1e-9);
    }

    #[test]
    fn fixed_budget_plans_end_at_the_bound(s in samples(), k in 1..12usize) {
        let d = EmpiricalDistribution::fit(&s, FitConfig::smoothed()).unwrap();
        let u = d.ppf(0.99).unwrap().max(1e-3);
        let eps = 1e-5 * u;
        let plan = solve_recurrence(d.density().unwrap(), k, u, eps).unwrap();
        prop_assert_eq!(plan.k(), k);
        prop_assert!((plan.polls[k - 1] - u).abs() <= eps + 1e-9);
        prop_assert!(plan.polls.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn lifecycle_events_are_ordered_and_unique(
        ack in 0.0..3.0f64, start in 0.0..10.0f64, len in 0.0..10.0f64, fail in any::<bool>(),
    ) {
        let plan = |u: f64| PhasePlan::new(vec![u / 2.0, u], u).unwrap();
        let detection = Detection::Polling { ack_to_start: plan(4.0), start_to_complete: plan(4.0), base_gap: 0.5 };
        let mut inst = ActionInstance::new("a", "d", "set", 2.0, MilestoneMap::status_field(), detection, 0.0).unwrap();
        let mut events = Vec::new();
        if ack < 2.0 {
            events.extend(inst.on_ack(ack));
        } else {
            events.extend(inst.on_ack_timeout(2.0));
        }
        let started = ack + start;
        let done = started + len;
        let mut guard = 0;
        while let Some(t) = inst.next_poll_at() {
            guard += 1;
            prop_assert!(guard < 10_000);
            let status = if fail || t < started { "acked" } else if t < done { "running" } else { "done" };
            let obs = DeviceState::default().with("status", StateValue::Text(status.into()));
            events.extend(inst.on_poll_result(&obs, t));
        }
        let mut seen = BTreeMap::new();
        for e in &events {
            prop_assert!(seen.insert(format!("{:?}", e.kind), e.t).is_none(), "duplicate {:?}", e.kind);
        }
        prop_assert!(!(seen.contains_key("Failure") && seen.contains_key("Complete")));
        let ts = inst.timestamps();
        let chain: Vec<f64> = [ts.ack, ts.start, ts.complete].into_iter().flatten().collect();
        prop_assert!(chain.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(inst.state().is_terminal());
        prop_assert_eq!(ts.get(EventKind::Failure).is_some(), ts.complete.is_none());
    }
}

fn small_run(seed: u64, polling: PollingPolicy, scheduling: SchedulingPolicy, queue: bool) -> SimTrace {
    let mut devices = office_devices();
    if queue {
        for d in &mut devices {
            d.busy_policy = BusyPolicy::Queue;
        }
    }
    let routines = random_routines(12, &devices, &RoutineGen::default(), seed);
    let wl = WorkloadSpec { routines, arrival_process: ArrivalProcess::bursty(), horizon: 600.0, seed }.build();
    let cfg = PolicyConfig { perturbation: 0.3, ..PolicyConfig::with(polling, scheduling) };
    let out = run(&wl, &devices, &cfg, seed).unwrap();
    assert_eq!(out.checks.safety_violations, 0);
    assert!(out.checks.serial_violation.is_none());
    out.trace
}

/// Physical `[start, complete]` per device, in start order.
fn physical(trace: &SimTrace) -> BTreeMap<String, Vec<(f64, f64, (usize, String))>> {
    let mut open = BTreeMap::new();
    let mut out: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for e in &trace.events {
        match e.kind.as_str() {
            "phys_start" => {
                open.insert(e.action_key().unwrap(), e.t);
            }
            "phys_complete" => {
                let k = e.action_key().unwrap();
                let t0 = open.remove(&k).unwrap();
                out.entry(e.device().unwrap().to_string()).or_default().push((t0, e.t, k));
            }
            _ => {}
        }
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

fn policies() -> impl Strategy<Value = (PollingPolicy, SchedulingPolicy)> {
    (
        prop::sample::select(vec![PollingPolicy::Adaptive, PollingPolicy::Periodic, PollingPolicy::NoPolling]),
        prop::sample::select(SchedulingPolicy::ALL.to_vec()),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn simulation_is_a_function_of_its_inputs((p, s) in policies(), seed in any::<u64>()) {
        let a = small_run(seed, p, s, false);
        let b = small_run(seed, p, s, false);
        prop_assert_eq!(a.to_json_lines(), b.to_json_lines());
        prop_assert!(a.events.windows(2).all(|w| w[0].t <= w[1].t));
    }

    #[test]
    fn devices_never_run_two_actions((p, s) in policies(), seed in any::<u64>(), queue in any::<bool>()) {
        let trace = small_run(seed, p, s, queue);
        for (dev, v) in physical(&trace) {
            for w in v.windows(2) {
                prop_assert!(w[1].0 >= w[0].1 - 1e-9, "{dev}: {:?} overlaps {:?}", w[0], w[1]);
            }
        }
        if queue {
            // Queued devices serve requests first in, first out.
            let mut requested: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
            for e in trace.of_kind("request") {
                requested.entry(e.device().unwrap().to_string()).or_default().push(e.action_key().unwrap());
            }
            for (dev, v) in physical(&trace) {
                let started: Vec<_> = v.into_iter().map(|x| x.2).collect();
                let order: Vec<_> = requested[&dev].iter().filter(|k| started.contains(k)).cloned().collect();
                prop_assert_eq!(started, order, "{}", dev);
            }
        }
    }
}
