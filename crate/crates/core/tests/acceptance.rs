//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rasc::dist::{load_traces, wasserstein, Density, DistributionStore, EmpiricalDistribution, FitConfig, StabilityTracker, Transition, TransitionKey};
use rasc::pollplan::{find_polls, solve_recurrence, vopt_plan, PollPlanRequest};
use rasc::routine::{ActionSpec, Edge, EventKind, RoutineDag};
use rasc::sched::verify_serial_equivalence;
use rasc::sim::polling::{trials_on_learned, Freeze, PlanKind, TrialConfig, TrialReport};
use rasc::sim::{
    office_devices, random_routines, run, ActionModel, ArrivalProcess, BusyPolicy, DeviceMode, DurationModel, PolicyConfig, PollingPolicy, RoutineGen,
    SchedulingPolicy, SimOutput, VirtualDevice, Workload, WorkloadSpec,
};

const TRACES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/traces.csv");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(limit: Duration, t0: Instant) -> bool {
    t0.elapsed() <= limit
}

fn trace_store() -> DistributionStore {
    load_traces(std::fs::File::open(TRACES).expect("trace corpus"), FitConfig::smoothed()).expect("trace corpus parses")
}

fn key(class: &str, action: &str, t: Transition) -> TransitionKey {
    TransitionKey::new(class, action, t).unwrap()
}

/// The five trace-fitted action classes with their detection windows.
fn classes() -> [(&'static str, &'static str, f64); 5] {
    [("door", "close", 2.0), ("door", "open", 2.0), ("shade", "up", 3.0), ("shade", "down", 3.0), ("thermostat", "set", 30.0)]
}

fn sampled(seed: u64, n: usize, mut f: impl FnMut(&mut ChaCha8Rng) -> f64) -> EmpiricalDistribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: Vec<f64> = (0..n).map(|_| f(&mut rng).max(0.0)).collect();
    EmpiricalDistribution::fit(&s, FitConfig::default()).unwrap()
}

fn normal(m: f64, sd: f64) -> Normal<f64> {
    Normal::new(m, sd).unwrap()
}

fn corpus() -> Vec<(String, EmpiricalDistribution)> {
    let mut out = Vec::new();
    for (i, (lo, hi)) in [(0.0, 5.0), (0.0, 10.0), (0.0, 30.0), (2.0, 8.0), (10.0, 20.0)].into_iter().enumerate() {
        out.push((format!("uniform({lo},{hi})"), sampled(100 + i as u64, 2000, |r| r.random_range(lo..hi))));
    }
    for (i, mean) in [2.0, 5.0, 20.0].into_iter().enumerate() {
        out.push((format!("exponential({mean})"), sampled(200 + i as u64, 2000, |r| Exp::new(1.0 / mean).unwrap().sample(r))));
    }
    for (i, (w, a, b)) in [(0.5, (10.0, 1.0), (20.0, 1.0)), (0.8, (26.5, 0.8), (31.25, 1.0)), (0.3, (5.0, 1.0), (15.0, 2.0)), (0.5, (3.0, 0.5), (6.0, 0.5))]
        .into_iter()
        .enumerate()
    {
        out.push((
            format!("bimodal({w},{a:?},{b:?})"),
            sampled(300 + i as u64, 2000, |r| if r.random::<f64>() < w { normal(a.0, a.1).sample(r) } else { normal(b.0, b.1).sample(r) }),
        ));
    }
    let store = trace_store();
    for (class, action) in [("door", "close"), ("door", "open"), ("shade", "up"), ("shade", "down")] {
        for t in [Transition::AckToStart, Transition::StartToComplete] {
            let k = key(class, action, t);
            out.push((k.to_string(), store.get(&k).unwrap().clone()));
        }
    }
    out
}

/// Minimum expected delay over placements on the grid `j * u / steps` with
/// the last poll at `u`, by dynamic programming over the previous poll.
fn grid_optimum(d: &Density, k: usize, u: f64, steps: usize) -> f64 {
    let g: Vec<f64> = (0..=steps).map(|j| j as f64 * u / steps as f64).collect();
    let f: Vec<f64> = g.iter().map(|&t| d.cdf(t)).collect();
    let mut best: Vec<f64> = (0..=steps).map(|j| if j == 0 { f64::INFINITY } else { g[j] * f[j] }).collect();
    for _ in 1..k {
        let mut next = vec![f64::INFINITY; steps + 1];
        for j in 1..=steps {
            for i in 1..j {
                let v = best[i] + g[j] * (f[j] - f[i]);
                if v < next[j] {
                    next[j] = v;
                }
            }
        }
        best = next;
    }
    best[steps] - d.partial_moment(u)
}

fn c1_poll_placement() -> Outcome {
    let t0 = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    let mut fails = Vec::new();
    let corpus = corpus();
    for (name, dist) in &corpus {
        let d = dist.density().unwrap();
        let u = dist.ppf(0.99).unwrap();
        for k in [2, 3, 4] {
            let plan = solve_recurrence(d, k, u, 1e-6 * u).unwrap();
            let q = plan.expected_detection.unwrap();
            let grid = grid_optimum(d, k, u, 200);
            let gap = (q - grid) / u;
            worst = worst.max(gap);
            if gap > 1e-3 {
                fails.push(format!("{name} k={k}: {q:.4} vs grid {grid:.4}"));
            }
        }
    }
    let fast = within(Duration::from_secs(60), t0);
    outcome(
        fails.is_empty() && fast,
        format!("{} distributions x 3 budgets, worst (Q - grid)/U = {worst:.2e}{}", corpus.len(), if fails.is_empty() { String::new() } else { format!("; {}", fails.join("; ")) }),
    )
}

fn c2_uniform_closed_form() -> Outcome {
    let d = EmpiricalDistribution::from_bins(10.0 / 64.0, &[1.0; 64], 1000).unwrap();
    let plan = solve_recurrence(d.density().unwrap(), 5, 10.0, 1e-6).unwrap();
    let want = [2.0, 4.0, 6.0, 8.0, 10.0];
    let polls_ok = plan.polls.len() == 5 && plan.polls.iter().zip(want).all(|(p, w)| (p - w).abs() <= 1e-3);
    let q = plan.expected_detection.unwrap();
    outcome(polls_ok && (q - 1.0).abs() <= 0.05, format!("polls {:?}, Q = {q:.4}", plan.polls.iter().map(|p| (p * 1e4).round() / 1e4).collect::<Vec<_>>()))
}

fn class_trials(plan: PlanKind, trials: usize) -> Vec<(String, f64, TrialReport)> {
    let store = trace_store();
    classes()
        .into_iter()
        .map(|(c, a, q_w)| {
            let d = store.get(&key(c, a, Transition::StartToComplete)).unwrap();
            (format!("{c}/{a}"), q_w, trials_on_learned(d, &TrialConfig::new(plan, q_w, trials, 11)).unwrap())
        })
        .collect()
}

fn c3_slo() -> Outcome {
    let t0 = Instant::now();
    let reports = class_trials(PlanKind::Adaptive, 10_000);
    let ok = reports.iter().all(|(_, _, r)| r.within_q_w >= 0.89 && r.false_failures == 0);
    let detail = reports.iter().map(|(n, _, r)| format!("{n} {:.3}", r.within_q_w)).collect::<Vec<_>>().join(", ");
    outcome(ok && within(Duration::from_secs(120), t0), format!("share within Q_w: {detail}"))
}

fn c4_polling_efficiency() -> Outcome {
    let adaptive = class_trials(PlanKind::Adaptive, 10_000);
    let periodic = class_trials(PlanKind::Periodic, 10_000);
    let mut fewer = 0;
    let mut late = 0;
    let mut parts = Vec::new();
    for ((name, q_w, a), (_, _, p)) in adaptive.iter().zip(&periodic) {
        let saving = 1.0 - a.polls.mean / p.polls.mean;
        if saving >= 0.4 {
            fewer += 1;
        }
        if a.detection.mean > *q_w {
            late += 1;
        }
        parts.push(format!("{name} -{:.0}%", saving * 100.0));
    }
    outcome(fewer >= 4 && late <= 1, format!("{fewer}/5 classes with >= 40% fewer polls ({}); {late} with mean detection above Q_w", parts.join(", ")))
}

fn c5_vopt() -> Outcome {
    let adaptive = class_trials(PlanKind::Adaptive, 10_000);
    let vopt = class_trials(PlanKind::VOpt, 10_000);
    let ratios: Vec<(String, f64)> = adaptive.iter().zip(&vopt).map(|((n, _, a), (_, _, v))| (n.clone(), a.detection.mean / v.detection.mean)).collect();
    let ratio_ok = ratios.iter().all(|(_, r)| (0.3..=3.0).contains(r));

    // Placement cost at 256 bins with the budget the adaptive search settles on.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s: Vec<f64> = (0..2000).map(|_| normal(30.0, 3.0).sample(&mut rng).max(0.0)).collect();
    let dist = EmpiricalDistribution::fit(&s, FitConfig::smoothed().with_bins(256)).unwrap();
    let d = dist.density().unwrap();
    let u = dist.ppf(0.99).unwrap();
    let k = find_polls(&PollPlanRequest::new(d, u, 1.0, 0.9)).unwrap().k();
    let reps = 200;
    let time = |f: &dyn Fn()| {
        let t = Instant::now();
        for _ in 0..reps {
            f();
        }
        t.elapsed().as_secs_f64() / reps as f64
    };
    let rec = time(&|| {
        std::hint::black_box(solve_recurrence(d, k, u, 1e-5 * u).unwrap());
    });
    let dp = time(&|| {
        std::hint::black_box(vopt_plan(d, k, u).unwrap());
    });
    let speedup = dp / rec;
    outcome(
        ratio_ok && rec < dp,
        format!(
            "adaptive/V-opt detection {}; k = {k} at 256 bins: recurrence {:.1} us, V-opt {:.1} us ({speedup:.0}x)",
            ratios.iter().map(|(n, r)| format!("{n} {r:.2}")).collect::<Vec<_>>().join(", "),
            rec * 1e6,
            dp * 1e6
        ),
    )
}

fn c6_convergence() -> Outcome {
    let mut quick = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = StabilityTracker::new();
        for _ in 0..25 {
            t.push(normal(30.0, 3.0).sample(&mut rng));
            if t.is_stable() {
                break;
            }
        }
        quick += t.is_stable() as usize;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let truth_new = sampled(78, 20_000, |r| r.random_range(10.0..20.0));
    let old: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..10.0)).collect();
    let mut model = EmpiricalDistribution::fit(&old, FitConfig::drift_aware()).unwrap();
    let before = wasserstein(&model, &truth_new).unwrap();
    let mut adapted_at = None;
    for i in 1..=200 {
        model = model.observe(rng.random_range(10.0..20.0)).unwrap();
        if adapted_at.is_none() && wasserstein(&model, &truth_new).unwrap() <= 1.0 {
            adapted_at = Some(i);
        }
    }
    let after = wasserstein(&model, &truth_new).unwrap();
    outcome(
        quick >= 95 && (before - 10.0).abs() <= 0.5 && adapted_at.is_some(),
        format!("{quick}/100 seeds stable within 25 samples; drift distance {before:.2} before, {after:.2} after 200 samples, <= 1.0 from sample {adapted_at:?}"),
    )
}

fn bad_checks(o: &SimOutput) -> usize {
    o.checks.safety_violations + o.checks.unfinished + o.checks.hub_conflicts + usize::from(o.checks.serial_violation.is_some()) + o.trace.device_overlaps()
}

fn c7_safety() -> Outcome {
    let devs: Vec<VirtualDevice> = office_devices().into_iter().filter(|d| ["door1", "light1", "shade1"].contains(&d.device_id.as_str())).collect();
    let mut bad = 0;
    let mut reschedules = 0;
    for seed in 0..1000u64 {
        let rs = random_routines(4, &devs, &RoutineGen::default(), seed);
        let wl = WorkloadSpec { routines: rs, arrival_process: ArrivalProcess::Random, horizon: 60.0, seed }.build();
        for p in [SchedulingPolicy::DagtlStf, SchedulingPolicy::DagtlRv] {
            let cfg = PolicyConfig { perturbation: 0.3, ..PolicyConfig::with(PollingPolicy::Adaptive, p) };
            let o = run(&wl, &devs, &cfg, seed).unwrap();
            bad += bad_checks(&o);
            reschedules += o.metrics.reschedules;
        }
    }
    outcome(bad == 0, format!("2000 runs, {reschedules} reschedules, {bad} violations"))
}

/// Deterministic push devices so that serial and concurrent runs share timings.
fn exact_devices() -> Vec<VirtualDevice> {
    [("x", 2.0), ("y", 3.0), ("z", 5.0)]
        .into_iter()
        .map(|(id, len)| VirtualDevice {
            device_id: id.into(),
            class: "exact".into(),
            mode: DeviceMode::Push,
            min_poll_interval: 0.1,
            busy_policy: BusyPolicy::Reject,
            ack_latency: 0.05,
            actions: BTreeMap::from([(
                "set".to_string(),
                ActionModel { ack_to_start: DurationModel::Fixed { s: 0.5 }, start_to_complete: DurationModel::Fixed { s: len }, reports_progress: false, fail_prob: 0.0 },
            )]),
        })
        .collect()
}

/// Actions on `devices`; `edges[(i, j)]` for `i < j` is 0 for none, else Ack, Start, Complete.
fn routine(name: &str, devices: &[usize], edges: &BTreeMap<(usize, usize), u8>) -> RoutineDag {
    let actions = devices
        .iter()
        .enumerate()
        .map(|(i, d)| ActionSpec { id: format!("a{i}"), device: ["x", "y", "z"][*d].into(), action: "set".into(), params: Default::default(), estimate: None })
        .collect();
    let edges = edges
        .iter()
        .filter_map(|(&(i, j), &e)| {
            let on = [None, Some(EventKind::Ack), Some(EventKind::Start), Some(EventKind::Complete)][e as usize]?;
            Some(Edge { parent: i, child: j, on })
        })
        .collect();
    RoutineDag::new(name, None, actions, edges).unwrap()
}

fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Every dependency pattern over `n` actions.
fn patterns(n: usize) -> Vec<BTreeMap<(usize, usize), u8>> {
    let ps = pairs(n);
    (0..4usize.pow(ps.len() as u32))
        .map(|mut code| {
            ps.iter()
                .map(|&p| {
                    let e = (code % 4) as u8;
                    code /= 4;
                    (p, e)
                })
                .collect()
        })
        .collect()
}

fn random_routine(name: &str, rng: &mut ChaCha8Rng) -> RoutineDag {
    let n = rng.random_range(1..=4);
    let devices: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let edges = pairs(n).into_iter().map(|p| (p, rng.random_range(0..4u8))).collect();
    routine(name, &devices, &edges)
}

/// Routine of each request per device, in request order. Independent actions
/// of one routine on one device may go in either order.
fn device_sequences(o: &SimOutput) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for e in o.trace.of_kind("request") {
        out.entry(e.device().unwrap().to_string()).or_default().push(e.action_key().unwrap().0);
    }
    out
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Checks one workload; returns an error description on mismatch.
fn check_serial(routines: &[RoutineDag], devs: &[VirtualDevice], cfg: &PolicyConfig) -> Result<(), String> {
    let n = routines.len();
    let concurrent = Workload::new(routines.iter().enumerate().map(|(i, r)| (r.clone(), i as f64 * 0.7)).collect());
    let o = run(&concurrent, devs, cfg, 1).map_err(|e| e.to_string())?;
    if bad_checks(&o) > 0 {
        return Err(format!("checks failed: {:?}", o.checks));
    }
    let ids: Vec<usize> = (0..n).collect();
    let witness = verify_serial_equivalence(o.timelines.as_ref().unwrap(), &ids).map_err(|v| format!("no serial order: {v:?}"))?;
    let observed = device_sequences(&o);
    let mut matching = 0;
    let mut witness_matches = false;
    for perm in permutations(n) {
        // perm[j] runs j-th, long after everything before it is done.
        let mut arrival = vec![0.0; n];
        for (j, &r) in perm.iter().enumerate() {
            arrival[r] = j as f64 * 1000.0;
        }
        let serial = Workload::new(routines.iter().enumerate().map(|(i, r)| (r.clone(), arrival[i])).collect());
        let so = run(&serial, devs, cfg, 1).map_err(|e| e.to_string())?;
        if device_sequences(&so) == observed {
            matching += 1;
            witness_matches |= perm == witness;
        }
    }
    if !witness_matches {
        return Err(format!("witness {witness:?} does not reproduce the device orders ({matching} permutations do)"));
    }
    Ok(())
}

fn c8_serial_equivalence() -> Outcome {
    let t0 = Instant::now();
    let devs = exact_devices();
    let mut families: Vec<Vec<RoutineDag>> = Vec::new();

    // Every routine of at most two actions, in every ordered pair.
    let mut small = Vec::new();
    for n in 1..=2 {
        for code in 0..3usize.pow(n as u32) {
            let devices: Vec<usize> = (0..n).map(|i| code / 3usize.pow(i as u32) % 3).collect();
            for pat in patterns(n) {
                small.push((devices.clone(), pat));
            }
        }
    }
    for a in &small {
        for b in &small {
            families.push(vec![routine("r0", &a.0, &a.1), routine("r1", &b.0, &b.1)]);
        }
    }
    // Every dependency pattern over three and four actions, each with random
    // device placement and random companions up to four routines.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in [3, 4] {
        for pat in patterns(n) {
            let devices: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let mut w = vec![routine("r0", &devices, &pat)];
            for i in 1..rng.random_range(2..=4) {
                w.push(random_routine(&format!("r{i}"), &mut rng));
            }
            families.push(w);
        }
    }
    let total = families.len();
    let mut failures = Vec::new();
    for scheduling in [SchedulingPolicy::DagtlStf, SchedulingPolicy::DagtlRv] {
        let cfg = PolicyConfig::with(PollingPolicy::Adaptive, scheduling);
        for w in &families {
            if let Err(e) = check_serial(w, &devs, &cfg) {
                failures.push(e);
            }
        }
    }
    let fast = within(Duration::from_secs(300), t0);
    outcome(
        failures.is_empty() && fast,
        format!("{total} workloads x 2 policies against all routine permutations, {} mismatches{}", failures.len(), failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()),
    )
}

fn c9_scheduling_gains() -> Outcome {
    let devs = office_devices();
    let mut acc: BTreeMap<SchedulingPolicy, (f64, f64, f64)> = BTreeMap::new();
    let mut bad = 0;
    let seeds = 10;
    for seed in 0..seeds {
        let rs = random_routines(100, &devs, &RoutineGen::default(), seed);
        let wl = WorkloadSpec { routines: rs, arrival_process: ArrivalProcess::bursty(), horizon: 7200.0, seed }.build();
        for p in SchedulingPolicy::ALL {
            let o = run(&wl, &devs, &PolicyConfig::with(PollingPolicy::Adaptive, p), seed).unwrap();
            bad += bad_checks(&o);
            let e = acc.entry(p).or_default();
            e.0 += o.metrics.latency.mean / seeds as f64;
            e.1 += o.metrics.wait_time.mean / seeds as f64;
            e.2 += o.metrics.parallelism.mean / seeds as f64;
        }
    }
    let baselines = [SchedulingPolicy::Fcfs, SchedulingPolicy::FcfsPost, SchedulingPolicy::Jit];
    let best = |f: fn(&(f64, f64, f64)) -> f64, max: bool| {
        let v = baselines.iter().map(|p| f(&acc[p]));
        if max {
            v.fold(f64::NEG_INFINITY, f64::max)
        } else {
            v.fold(f64::INFINITY, f64::min)
        }
    };
    let (lat, wait, par) = (best(|x| x.0, false), best(|x| x.1, false), best(|x| x.2, true));
    let mut ok = bad == 0;
    let mut parts = Vec::new();
    for p in [SchedulingPolicy::DagtlStf, SchedulingPolicy::DagtlRv] {
        let (l, w, pa) = acc[&p];
        ok &= l <= 0.9 * lat && w <= 0.9 * wait && pa >= par;
        parts.push(format!("{} latency {:+.0}%, wait {:+.0}%, parallelism {pa:.2}", p.label(), (l / lat - 1.0) * 100.0, (w / wait - 1.0) * 100.0));
    }
    outcome(ok, format!("vs best baseline (latency {lat:.1}, wait {wait:.1}, parallelism {par:.2}): {}", parts.join("; ")))
}

fn c10_interruptions() -> Outcome {
    let store = trace_store();
    let d = store.get(&key("thermostat", "set", Transition::StartToComplete)).unwrap();
    let q_w = 30.0;
    let trial = |at: f64, duration: f64| {
        let mut c = TrialConfig::new(PlanKind::Adaptive, q_w, 500, 5);
        c.reports_progress = true;
        c.freeze = Some(Freeze { at_fraction: at, duration });
        trials_on_learned(d, &c).unwrap().false_failures
    };
    let mild = trial(0.5, 0.5 * q_w);
    let double = trial(0.9, 2.0 * q_w);
    let long = trial(0.9, 4.0 * q_w);
    outcome(mild == 0 && long >= 1, format!("500 runs each: 50% for 0.5 Q_w -> {mild}; 90% for 2 Q_w -> {double}; 90% for 4 Q_w -> {long} false failures"))
}

fn c11_determinism() -> Outcome {
    let devs = office_devices();
    let rs = random_routines(30, &devs, &RoutineGen::default(), 3);
    let wl = WorkloadSpec { routines: rs, arrival_process: ArrivalProcess::bursty(), horizon: 1800.0, seed: 3 }.build();
    let mut same = 0;
    let mut cells = 0;
    for polling in [PollingPolicy::Adaptive, PollingPolicy::Periodic, PollingPolicy::NoPolling] {
        for p in SchedulingPolicy::ALL {
            let cfg = PolicyConfig { perturbation: 0.2, ..PolicyConfig::with(polling, p) };
            let a = run(&wl, &devs, &cfg, 42).unwrap();
            let b = run(&wl, &devs, &cfg, 42).unwrap();
            cells += 1;
            let metrics = |o: &SimOutput| serde_json::to_string(&o.metrics).unwrap();
            if a.trace.to_json_lines() == b.trace.to_json_lines() && metrics(&a) == metrics(&b) {
                same += 1;
            }
        }
    }
    outcome(same == cells, format!("{same}/{cells} policy cells byte-identical on rerun"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("poll placement optimality", c1_poll_placement),
        ("uniform closed form", c2_uniform_closed_form),
        ("SLO guarantee", c3_slo),
        ("polling efficiency", c4_polling_efficiency),
        ("V-opt comparison", c5_vopt),
        ("convergence and drift", c6_convergence),
        ("safety", c7_safety),
        ("serial equivalence", c8_serial_equivalence),
        ("scheduling gains", c9_scheduling_gains),
        ("interruption false positives", c10_interruptions),
        ("determinism", c11_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!o.pass);
        println!("acceptance {:>2} {name}: {} ({}; {:.1}s)", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail, t0.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

