//! The event loop.
//!
//! Events are ordered by `(time, insertion sequence)`, so equal timestamps
//! are processed first in first out and a run is a pure function of its
//! inputs and seed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::metrics::{compute_metrics, MetricsReport};
use super::trace::SimTrace;
use super::workload::Workload;
use super::{DeviceMode, BusyPolicy, Interruption, PolicyConfig, PollingPolicy, SchedulingPolicy, SimError, VirtualDevice};
use crate::dist::{DistributionStore, EmpiricalDistribution, FitConfig, Transition, TransitionKey};
use crate::lifecycle::{ActionInstance, ActionState, DeviceState, Detection, EventKind, InFlight, MilestoneMap, PhasePlan, ProgressEvent, StateValue};
use crate::pollplan::{find_polls, periodic_plan, PollPlanRequest};
use crate::resched::{late_dt, reschedule, Admission, AuditEntry, BaselinePolicy, Deviation, ReschedPolicy};
use crate::routine::{ActionStatus, Estimate, RoutineRun, RunUpdate};
use crate::sched::{schedule_routine, verify_safety, verify_serial_equivalence, RoutineId, Schedule, SerialViolation, SlotState, Timelines};

const EPS: f64 = 1e-9;
const MAX_EVENTS: usize = 20_000_000;

/// Invariant checks gathered during a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunChecks {
    /// Planner states with overlapping slots on a device.
    pub safety_violations: usize,
    /// Set when the executed device orders admit no serial order.
    pub serial_violation: Option<SerialViolation>,
    /// Routines that never finished.
    pub unfinished: usize,
    /// Dispatches refused because the hub already held the device.
    pub hub_conflicts: usize,
    pub events: usize,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub trace: SimTrace,
    pub metrics: MetricsReport,
    pub audit: Vec<AuditEntry>,
    pub checks: RunChecks,
    /// Final planner timelines under DAG-TL policies.
    pub timelines: Option<Timelines>,
}

/// A configured run.
#[derive(Debug, Clone)]
pub struct SimRun<'a> {
    pub workload: &'a Workload,
    pub devices: &'a [VirtualDevice],
    pub config: PolicyConfig,
    pub seed: u64,
    knowledge: Option<&'a DistributionStore>,
}

impl<'a> SimRun<'a> {
    pub fn new(workload: &'a Workload, devices: &'a [VirtualDevice], config: PolicyConfig, seed: u64) -> Self {
        SimRun { workload, devices, config, seed, knowledge: None }
    }

    /// Distributions the hub uses instead of training, keyed by device class.
    pub fn with_knowledge(mut self, store: &'a DistributionStore) -> Self {
        self.knowledge = Some(store);
        self
    }

    pub fn inject_interruption(mut self, i: Interruption) -> Self {
        self.config.interruptions.push(i);
        self
    }

    pub fn execute(&self) -> Result<SimOutput, SimError> {
        self.config.validate()?;
        for d in self.devices {
            d.validate()?;
        }
        self.workload.check_devices(self.devices)?;
        let mut eng = Engine::new(self)?;
        eng.run_loop()?;
        Ok(eng.finish())
    }
}

pub fn run(workload: &Workload, devices: &[VirtualDevice], config: &PolicyConfig, seed: u64) -> Result<SimOutput, SimError> {
    SimRun::new(workload, devices, config.clone(), seed).execute()
}

#[derive(Debug, Clone)]
enum Ev {
    Arrival(usize),
    Wake(String),
    Ack(usize, usize),
    AckTimeout(usize, usize),
    Poll(usize, usize),
    PollResult(usize, usize, DeviceState),
    Push(usize, usize, DeviceState),
    PushDeadline(usize, usize),
    Assume(usize, usize),
    PhysStart(usize, usize),
    Interrupt(usize, usize),
    PhysComplete(usize, usize),
    LateCheck(usize, usize, u32),
}

struct Queued {
    t: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

/// What the hub knows and does for one device action kind.
#[derive(Debug, Clone)]
struct Plans {
    detection: Detection,
    /// Milestones are taken as given at the phase bounds.
    assumed: bool,
    u1: f64,
    u2: f64,
    q_w: f64,
    estimate: Estimate,
}

#[derive(Debug, Clone, Default)]
struct ActionRt {
    d1: f64,
    d2: f64,
    stalled: bool,
    /// `(at_fraction, duration)` of an injected interruption.
    freeze: Option<(f64, f64)>,
    reports_progress: bool,
    phys_start: Option<f64>,
    phys_complete: Option<f64>,
    inst: Option<ActionInstance>,
    plans: Option<Arc<Plans>>,
    poll_at: Option<f64>,
    deadline_at: Option<f64>,
    assumed_phase: Option<ActionState>,
    last_progress: Option<f64>,
    late_epoch: u32,
}

impl ActionRt {
    fn freeze_len(&self) -> f64 {
        self.freeze.map_or(0.0, |(_, d)| d)
    }

    /// Physical progress through the start to complete phase at `tau`.
    fn progress(&self, tau: f64) -> f64 {
        let Some(s) = self.phys_start else { return 0.0 };
        if self.d2 <= 0.0 {
            return if tau >= s { 1.0 } else { 0.0 };
        }
        let e = tau - s;
        if e <= 0.0 {
            return 0.0;
        }
        let p = match self.freeze {
            Some((f, dur)) if e >= f * self.d2 => {
                if e < f * self.d2 + dur {
                    f
                } else {
                    (e - dur) / self.d2
                }
            }
            _ => e / self.d2,
        };
        p.clamp(0.0, 1.0)
    }

    fn observe(&self, tau: f64) -> DeviceState {
        let text = |s: &str| StateValue::Text(s.to_string());
        let status = match (self.phys_start, self.phys_complete) {
            (_, Some(c)) if tau >= c => "done",
            (Some(s), _) if tau >= s => "running",
            _ => "acked",
        };
        let mut obs = DeviceState::default().with("status", text(status));
        if self.reports_progress {
            let p = if status == "done" { 1.0 } else { self.progress(tau) };
            obs = obs.with("progress", StateValue::Number(p));
        }
        obs
    }
}

struct RoutineRt {
    run: Option<RoutineRun>,
    actions: Vec<ActionRt>,
    finished: bool,
}

struct Engine<'a> {
    cfg: &'a PolicyConfig,
    wl: &'a Workload,
    devices: BTreeMap<&'a str, &'a VirtualDevice>,
    busy_until: BTreeMap<String, f64>,
    routines: Vec<RoutineRt>,
    heap: BinaryHeap<Queued>,
    seq: u64,
    now: f64,
    trace: SimTrace,
    audit: Vec<AuditEntry>,
    checks: RunChecks,
    inflight: InFlight,
    sched: Schedule,
    sid_of: Vec<Option<RoutineId>>,
    wl_of: Vec<usize>,
    admission: Option<Admission>,
    /// Ready, undispatched actions under baseline policies: `(arrival rank, topo position, routine, action)`.
    ready: BTreeSet<(usize, usize, usize, usize)>,
    arrival_rank: Vec<usize>,
    wakes: BTreeMap<String, f64>,
}

fn train(model: &super::DurationModel, n: usize, rng: &mut ChaCha8Rng) -> Result<EmpiricalDistribution, SimError> {
    let samples: Vec<f64> = (0..n).map(|_| model.sample(rng)).collect();
    Ok(EmpiricalDistribution::fit(&samples, FitConfig::smoothed())?)
}

fn phase_plan(dist: &EmpiricalDistribution, polling: PollingPolicy, q_w: f64, slo: f64, min_interval: f64) -> Result<(PhasePlan, f64), SimError> {
    let u = dist.ppf(0.99)?.max(1e-3);
    // Phases shorter than the poll interval get one poll at the interval.
    if u <= min_interval {
        let at = min_interval.max(1e-3);
        return Ok((PhasePlan::new(vec![at], at).map_err(|e| SimError::Config(e.to_string()))?, at));
    }
    let polls = match polling {
        PollingPolicy::Periodic => periodic_plan(u, q_w)?.polls,
        _ => {
            let density = dist.density()?;
            find_polls(&PollPlanRequest::new(density, u, q_w, slo).min_poll_interval(min_interval))?.polls
        }
    };
    let plan = PhasePlan::new(polls, u).map_err(|e| SimError::Config(e.to_string()))?;
    Ok((plan, u))
}

impl<'a> Engine<'a> {
    fn new<'s: 'a>(r: &'a SimRun<'s>) -> Result<Self, SimError> {
        let cfg = &r.config;
        let devices: BTreeMap<&str, &VirtualDevice> = r.devices.iter().map(|d| (d.device_id.as_str(), d)).collect();

        // Hub knowledge, one learned model per (class, action, transition).
        let mut train_rng = ChaCha8Rng::seed_from_u64(r.seed);
        train_rng.set_stream(3);
        let mut learned: BTreeMap<TransitionKey, EmpiricalDistribution> = BTreeMap::new();
        let mut plans: BTreeMap<(String, String), Arc<Plans>> = BTreeMap::new();
        for d in devices.values() {
            for (kind, m) in &d.actions {
                let mut dists = Vec::with_capacity(2);
                for (t, model) in [(Transition::AckToStart, &m.ack_to_start), (Transition::StartToComplete, &m.start_to_complete)] {
                    let key = TransitionKey::new(&d.class, kind, t)?;
                    if !learned.contains_key(&key) {
                        let dist = match r.knowledge.and_then(|k| k.get(&key).ok()) {
                            Some(known) => known.clone(),
                            None => train(model, cfg.training_samples, &mut train_rng)?,
                        };
                        learned.insert(key.clone(), dist);
                    }
                    dists.push(learned[&key].clone());
                }
                let q_w = cfg.q_w_for(&d.class);
                let assumed = cfg.polling == PollingPolicy::NoPolling && d.mode == DeviceMode::Pull;
                let (p1, u1) = phase_plan(&dists[0], cfg.polling, q_w, cfg.slo, d.min_poll_interval)?;
                let (p2, u2) = phase_plan(&dists[1], cfg.polling, q_w, cfg.slo, d.min_poll_interval)?;
                let detection = if d.mode == DeviceMode::Push || assumed {
                    Detection::Push { u_ack_to_start: u1, u_start_to_complete: u2 }
                } else {
                    Detection::Polling { ack_to_start: p1, start_to_complete: p2, base_gap: (q_w / 4.0).max(d.min_poll_interval) }
                };
                let ack = d.ack_latency + 2.0 * cfg.network_delay;
                let start = ack + dists[0].mean()?;
                let complete = (start + dists[1].mean()?).max(start + 1e-3);
                let estimate = Estimate::new(ack, start, complete).map_err(|e| SimError::Config(e.to_string()))?;
                plans.insert((d.device_id.clone(), kind.clone()), Arc::new(Plans { detection, assumed, u1, u2, q_w, estimate }));
            }
        }

        // Ground truth, drawn up front so every policy sees the same durations.
        let mut truth_rng = ChaCha8Rng::seed_from_u64(r.seed);
        truth_rng.set_stream(4);
        let mut freezes: BTreeMap<(usize, String), (f64, f64)> = BTreeMap::new();
        let mut trace = SimTrace::default();
        for i in &cfg.interruptions {
            let valid = i.routine < r.workload.len() && r.workload.items[i.routine].routine.index_of(&i.action).is_some();
            if !valid {
                return Err(SimError::Config(format!("interruption targets unknown action {}/{}", i.routine, i.action)));
            }
            if !(0.0..1.0).contains(&i.at_fraction) {
                trace.push(0.0, "warning", json!({"message": "interruption beyond completion ignored", "routine": i.routine, "action": i.action}));
            } else if i.duration > 0.0 {
                freezes.insert((i.routine, i.action.clone()), (i.at_fraction, i.duration));
            }
        }
        let p = cfg.perturbation;
        let mut routines = Vec::with_capacity(r.workload.len());
        for (ri, item) in r.workload.items.iter().enumerate() {
            let mut actions = Vec::with_capacity(item.routine.len());
            for spec in item.routine.actions() {
                let m = &devices[spec.device.as_str()].actions[&spec.action];
                let f1: f64 = truth_rng.random_range(-1.0..1.0);
                let f2: f64 = truth_rng.random_range(-1.0..1.0);
                let stall: f64 = truth_rng.random();
                let d1 = m.ack_to_start.sample(&mut truth_rng) * (1.0 + p * f1);
                let d2 = m.start_to_complete.sample(&mut truth_rng) * (1.0 + p * f2);
                actions.push(ActionRt {
                    d1: d1.max(0.0),
                    d2: d2.max(0.0),
                    stalled: stall < m.fail_prob,
                    freeze: freezes.get(&(ri, spec.id.clone())).copied(),
                    reports_progress: m.reports_progress,
                    plans: Some(plans[&(spec.device.clone(), spec.action.clone())].clone()),
                    ..ActionRt::default()
                });
            }
            routines.push(RoutineRt { run: None, actions, finished: false });
        }

        let mut by_arrival: Vec<usize> = (0..r.workload.len()).collect();
        by_arrival.sort_by(|&a, &b| r.workload.items[a].arrival.total_cmp(&r.workload.items[b].arrival).then(a.cmp(&b)));
        let mut arrival_rank = vec![0; by_arrival.len()];
        for (rank, &i) in by_arrival.iter().enumerate() {
            arrival_rank[i] = rank;
        }
        let admission = match cfg.scheduling {
            SchedulingPolicy::Fcfs => Some(Admission::new(BaselinePolicy::Fcfs)),
            SchedulingPolicy::FcfsPost => Some(Admission::new(BaselinePolicy::FcfsPost)),
            SchedulingPolicy::Jit => Some(Admission::new(BaselinePolicy::Jit)),
            _ => None,
        };

        let mut eng = Engine {
            cfg,
            wl: r.workload,
            busy_until: devices.keys().map(|k| (k.to_string(), f64::NEG_INFINITY)).collect(),
            devices,
            routines,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            trace,
            audit: Vec::new(),
            checks: RunChecks::default(),
            inflight: InFlight::default(),
            sched: Schedule::new(),
            sid_of: vec![None; r.workload.len()],
            wl_of: Vec::new(),
            admission,
            ready: BTreeSet::new(),
            arrival_rank,
            wakes: BTreeMap::new(),
        };
        for &i in &by_arrival {
            eng.push(r.workload.items[i].arrival, Ev::Arrival(i));
        }
        Ok(eng)
    }

    fn push(&mut self, t: f64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Queued { t: t.max(self.now), seq: self.seq, ev });
    }

    fn run_loop(&mut self) -> Result<(), SimError> {
        while let Some(q) = self.heap.pop() {
            self.checks.events += 1;
            if self.checks.events > MAX_EVENTS {
                return Err(SimError::Runaway(MAX_EVENTS));
            }
            debug_assert!(q.t >= self.now - EPS);
            self.now = q.t;
            self.handle(q.ev)?;
            self.try_dispatch()?;
        }
        Ok(())
    }

    fn finish(mut self) -> SimOutput {
        self.checks.unfinished = self.routines.iter().filter(|r| !r.finished).count();
        let timelines = if self.cfg.scheduling.is_dagtl() {
            let ids: Vec<RoutineId> = (0..self.sched.routines().len()).collect();
            if let Err(v) = verify_serial_equivalence(&self.sched.timelines, &ids) {
                self.checks.serial_violation = Some(v);
            }
            if !verify_safety(&self.sched.timelines) {
                self.checks.safety_violations += 1;
            }
            Some(self.sched.timelines.clone())
        } else {
            None
        };
        let metrics = compute_metrics(&self.trace);
        SimOutput { trace: self.trace, metrics, audit: self.audit, checks: self.checks, timelines }
    }

    fn device_of(&self, r: usize, a: usize) -> &'a str {
        let item = &self.wl.items[r];
        let dev = item.routine.action(a).device.as_str();
        *self.devices.get_key_value(dev).expect("checked device").0
    }

    fn payload(&self, r: usize, a: usize) -> serde_json::Value {
        json!({"routine": r, "action": self.wl.items[r].routine.action(a).id, "device": self.device_of(r, a)})
    }

    fn handle(&mut self, ev: Ev) -> Result<(), SimError> {
        let now = self.now;
        match ev {
            Ev::Arrival(r) => self.arrive(r)?,
            Ev::Wake(d) => {
                if self.wakes.get(&d).is_some_and(|w| (*w - now).abs() <= EPS) {
                    self.wakes.remove(&d);
                }
            }
            Ev::Ack(r, a) => {
                let evs = self.inst(r, a).on_ack(now);
                self.deliver(r, a, evs)?;
            }
            Ev::AckTimeout(r, a) => {
                let evs = self.inst(r, a).on_ack_timeout(now);
                self.deliver(r, a, evs)?;
            }
            Ev::Poll(r, a) => {
                let rt = &mut self.routines[r].actions[a];
                if rt.poll_at.is_none_or(|p| (p - now).abs() > EPS) {
                    return Ok(());
                }
                rt.poll_at = None;
                let net = self.cfg.network_delay;
                let obs = rt.observe(now + net);
                self.trace.push(now, "poll", self.payload(r, a));
                if net > 0.0 {
                    self.push(now + 2.0 * net, Ev::PollResult(r, a, obs));
                } else {
                    self.poll_result(r, a, obs)?;
                }
            }
            Ev::PollResult(r, a, obs) => self.poll_result(r, a, obs)?,
            Ev::Push(r, a, obs) => {
                let evs = self.inst(r, a).on_push_update(&obs, now);
                self.deliver(r, a, evs)?;
            }
            Ev::PushDeadline(r, a) => {
                self.routines[r].actions[a].deadline_at = None;
                let evs = self.inst(r, a).on_deadline(now);
                self.deliver(r, a, evs)?;
            }
            Ev::Assume(r, a) => {
                let rt = &self.routines[r].actions[a];
                let status = match rt.inst.as_ref().map(ActionInstance::state) {
                    Some(ActionState::StartDetection) => "running",
                    Some(ActionState::CompleteDetection) => "done",
                    _ => return Ok(()),
                };
                let obs = DeviceState::default().with("status", StateValue::Text(status.into()));
                let evs = self.inst(r, a).on_push_update(&obs, now);
                self.deliver(r, a, evs)?;
            }
            Ev::PhysStart(r, a) => {
                self.trace.push(now, "phys_start", self.payload(r, a));
                self.device_push(r, a, now);
            }
            Ev::Interrupt(r, a) => {
                let mut p = self.payload(r, a);
                p["duration"] = json!(self.routines[r].actions[a].freeze_len());
                self.trace.push(now, "interrupt", p);
            }
            Ev::PhysComplete(r, a) => {
                let rt = &self.routines[r].actions[a];
                let mut p = self.payload(r, a);
                p["sampled"] = json!(rt.d2);
                p["interrupted"] = json!(rt.freeze_len());
                self.trace.push(now, "phys_complete", p);
                self.device_push(r, a, now);
            }
            Ev::LateCheck(r, a, epoch) => self.late_check(r, a, epoch)?,
        }
        Ok(())
    }

    fn inst(&mut self, r: usize, a: usize) -> &mut ActionInstance {
        self.routines[r].actions[a].inst.as_mut().expect("dispatched action")
    }

    fn device_push(&mut self, r: usize, a: usize, now: f64) {
        let push_mode = self.devices[self.device_of(r, a)].mode == DeviceMode::Push;
        if push_mode {
            let net = self.cfg.network_delay;
            let obs = self.routines[r].actions[a].observe(now);
            self.push(now + net, Ev::Push(r, a, obs));
        }
    }

    fn poll_result(&mut self, r: usize, a: usize, obs: DeviceState) -> Result<(), SimError> {
        let now = self.now;
        if let Some(p) = obs.number("progress") {
            let rt = &mut self.routines[r].actions[a];
            rt.last_progress = Some(rt.last_progress.map_or(p, |l: f64| l.max(p)));
        }
        let evs = self.inst(r, a).on_poll_result(&obs, now);
        self.deliver(r, a, evs)
    }

    fn arrive(&mut self, r: usize) -> Result<(), SimError> {
        let now = self.now;
        let item = &self.wl.items[r];
        let dag = item.routine.clone();
        self.trace.push(now, "arrival", json!({"routine": r, "name": dag.id}));
        let (run, upd) = RoutineRun::start(&dag, now);
        self.routines[r].run = Some(run);
        if self.cfg.scheduling.is_dagtl() {
            let estimates: Vec<Estimate> = self.routines[r].actions.iter().map(|x| x.plans.as_ref().expect("plans").estimate).collect();
            let sid = self.sched.add_routine(&dag.id, dag.clone(), Some(estimates), now);
            self.sid_of[r] = Some(sid);
            self.wl_of.push(r);
            schedule_routine(&mut self.sched, sid, now);
            if !verify_safety(&self.sched.timelines) {
                self.checks.safety_violations += 1;
            }
        }
        if let Some(adm) = self.admission.as_mut() {
            adm.add_routine(r, &dag);
        }
        self.apply_update(r, upd);
        Ok(())
    }

    fn apply_update(&mut self, r: usize, upd: RunUpdate) {
        let now = self.now;
        let dag = self.wl.items[r].routine.clone();
        for &i in &upd.ready {
            self.trace.push(now, "ready", json!({"routine": r, "action": dag.action(i).id}));
            if self.admission.is_some() {
                let topo = dag.topo_order().iter().position(|&x| x == i).unwrap_or(i);
                self.ready.insert((self.arrival_rank[r], topo, r, i));
            }
        }
        for &i in &upd.dead {
            self.trace.push(now, "dead", json!({"routine": r, "action": dag.action(i).id}));
            if let Some(sid) = self.sid_of[r] {
                self.sched.release(sid, i);
            }
            let dev = self.device_of(r, i);
            if let Some(adm) = self.admission.as_mut() {
                adm.on_final(r, dev);
            }
        }
        self.check_finished(r);
    }

    fn check_finished(&mut self, r: usize) {
        let rt = &mut self.routines[r];
        if !rt.finished && rt.run.as_ref().is_some_and(RoutineRun::is_finished) {
            rt.finished = true;
            self.trace.push(self.now, "finish", json!({"routine": r}));
        }
    }

    /// Routes detected milestones to routine logic and the planner.
    fn deliver(&mut self, r: usize, a: usize, evs: Vec<ProgressEvent>) -> Result<(), SimError> {
        let now = self.now;
        let assumed = self.routines[r].actions[a].plans.as_ref().is_some_and(|p| p.assumed);
        for ev in evs {
            let mut p = self.payload(r, a);
            if assumed && matches!(ev.kind, EventKind::Start | EventKind::Complete) {
                p["assumed"] = json!(true);
            }
            self.trace.push(ev.t, &ev.kind.to_string(), p);
            let dag = self.wl.items[r].routine.clone();
            let upd = self.routines[r].run.as_mut().expect("arrived").on_event(&dag, a, ev.kind, ev.t);
            if let Some(sid) = self.sid_of[r] {
                let planned_end = self.sched.slot(sid, a).map(|s| s.end);
                self.sched.record(sid, a, ev.kind, ev.t);
                if ev.kind.is_terminal() {
                    if let Some(pe) = planned_end {
                        if let Some(dev) = Deviation::early(sid, a, pe, ev.t, &self.cfg.resched) {
                            self.do_reschedule(dev, "early")?;
                        }
                    }
                }
            }
            if ev.kind.is_terminal() {
                let dev = self.device_of(r, a);
                self.inflight.release(dev);
                if let Some(adm) = self.admission.as_mut() {
                    adm.on_final(r, dev);
                }
                self.routines[r].actions[a].late_epoch += 1;
            }
            self.apply_update(r, upd);
        }
        self.arm(r, a);
        let _ = now;
        Ok(())
    }

    /// Schedules whatever the instance waits for next.
    fn arm(&mut self, r: usize, a: usize) {
        let now = self.now;
        let rt = &mut self.routines[r].actions[a];
        let Some(inst) = rt.inst.as_ref() else { return };
        let state = inst.state();
        if state.is_terminal() {
            return;
        }
        let plans = rt.plans.clone().expect("plans");
        let mut next = Vec::new();
        if plans.assumed {
            if matches!(state, ActionState::StartDetection | ActionState::CompleteDetection) && rt.assumed_phase != Some(state) {
                rt.assumed_phase = Some(state);
                let u = if state == ActionState::StartDetection { plans.u1 } else { plans.u2 };
                next.push((now + u, Ev::Assume(r, a)));
            }
        } else if inst.is_push() {
            if let Some(d) = inst.push_deadline() {
                if rt.deadline_at.is_none_or(|x| (x - d).abs() > EPS) {
                    rt.deadline_at = Some(d);
                    next.push((d, Ev::PushDeadline(r, a)));
                }
            }
        } else if let Some(p) = inst.next_poll_at() {
            if rt.poll_at.is_none_or(|x| (x - p).abs() > EPS) {
                rt.poll_at = Some(p);
                next.push((p, Ev::Poll(r, a)));
            }
        }
        for (t, ev) in next {
            self.push(t, ev);
        }
    }

    fn do_reschedule(&mut self, dev: Deviation, trigger: &str) -> Result<(), SimError> {
        let policy = match self.cfg.scheduling {
            SchedulingPolicy::DagtlRv => ReschedPolicy::Rv,
            _ => ReschedPolicy::Stf,
        };
        let (impacted, elapsed) = timed(|| reschedule(policy, &dev, &mut self.sched, self.now));
        let impacted = impacted.map_err(|e| SimError::Config(e.to_string()))?;
        if !verify_safety(&self.sched.timelines) {
            self.checks.safety_violations += 1;
        }
        let r = self.wl_of[dev.routine];
        let mut p = self.payload(r, dev.action);
        p["trigger"] = json!(trigger);
        p["kind"] = json!(dev.kind);
        p["impacted"] = json!(impacted);
        p["policy"] = json!(policy);
        self.trace.push(self.now, "reschedule", p);
        self.audit.push(AuditEntry { t: self.now, trigger: trigger.to_string(), kind: dev.kind, impacted, policy, elapsed_compute: elapsed });
        Ok(())
    }

    /// Reactive late trigger at the planned end plus the threshold; with
    /// progress reports also a proactive one late in the phase.
    fn late_check(&mut self, r: usize, a: usize, epoch: u32) -> Result<(), SimError> {
        let now = self.now;
        let Some(sid) = self.sid_of[r] else { return Ok(()) };
        let rt = &self.routines[r].actions[a];
        if rt.late_epoch != epoch {
            return Ok(());
        }
        let Some(slot) = self.sched.slot(sid, a).copied() else { return Ok(()) };
        if slot.state != SlotState::Running {
            return Ok(());
        }
        let plans = rt.plans.clone().expect("plans");
        let thr = self.cfg.resched.reactive_threshold;
        let progress = if rt.reports_progress { rt.last_progress.filter(|p| *p > 0.0 && *p < 1.0) } else { None };
        let u_total = plans.estimate.ack + plans.u1 + plans.u2;
        let dt = late_dt(now - slot.start, progress, slot.end - slot.start, u_total, plans.q_w);
        let reactive = now >= slot.end + thr - EPS;
        if reactive || dt > thr {
            let dt = if reactive { dt.max(now - slot.end) } else { dt };
            self.do_reschedule(Deviation::late(sid, a, dt, now), if reactive { "late" } else { "proactive" })?;
        }
        let rt = &mut self.routines[r].actions[a];
        rt.late_epoch += 1;
        let epoch = rt.late_epoch;
        let end = self.sched.slot(sid, a).map_or(now, |s| s.end);
        self.push((end + thr).max(now + EPS.max(thr * 1e-3)), Ev::LateCheck(r, a, epoch));
        Ok(())
    }

    fn schedule_wake(&mut self, dev: &str, t: f64) {
        let now = self.now;
        if self.wakes.get(dev).is_some_and(|w| *w <= t + EPS && *w >= now - EPS) {
            return;
        }
        self.wakes.insert(dev.to_string(), t);
        self.push(t, Ev::Wake(dev.to_string()));
    }

    fn try_dispatch(&mut self) -> Result<(), SimError> {
        let now = self.now;
        let mut go: Vec<(usize, usize)> = Vec::new();
        if self.cfg.scheduling.is_dagtl() {
            let mut wake: Vec<(String, f64)> = Vec::new();
            for tl in self.sched.timelines.iter() {
                let Some(head) = tl.slots().iter().find(|s| s.state != SlotState::Done) else { continue };
                if head.state != SlotState::Planned || self.inflight.holder(&tl.device).is_some() {
                    continue;
                }
                let r = self.wl_of[head.routine];
                let run = self.routines[r].run.as_ref().expect("arrived");
                if run.status(head.action) != ActionStatus::Ready {
                    continue;
                }
                if now >= head.start - EPS {
                    go.push((r, head.action));
                } else {
                    wake.push((tl.device.clone(), head.start));
                }
            }
            for (d, t) in wake {
                self.schedule_wake(&d, t);
            }
        } else {
            let candidates: Vec<(usize, usize)> = self.ready.iter().map(|&(_, _, r, a)| (r, a)).collect();
            let mut taken: BTreeSet<&str> = BTreeSet::new();
            for (r, a) in candidates {
                let dev = self.device_of(r, a);
                if taken.contains(dev) || self.inflight.holder(dev).is_some() {
                    continue;
                }
                let adm = self.admission.as_mut().expect("baseline admission");
                // Admitting here lets later candidates of the same pass see it.
                if adm.may_start(r, dev) {
                    adm.on_dispatch(r);
                    taken.insert(dev);
                    go.push((r, a));
                }
            }
        }
        for (r, a) in go {
            self.dispatch(r, a)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, r: usize, a: usize) -> Result<(), SimError> {
        let now = self.now;
        let dev_id = self.device_of(r, a);
        let dev = self.devices[dev_id];
        let spec = self.wl.items[r].routine.action(a);
        let key = format!("{r}/{}", spec.id);
        if self.inflight.request_action(dev_id, &key).is_err() {
            self.checks.hub_conflicts += 1;
            return Ok(());
        }
        self.trace.push(now, "request", self.payload(r, a));
        self.routines[r].run.as_mut().expect("arrived").mark_dispatched(a);
        if self.admission.is_some() {
            let dag = self.wl.items[r].routine.clone();
            let topo = dag.topo_order().iter().position(|&x| x == a).unwrap_or(a);
            self.ready.remove(&(self.arrival_rank[r], topo, r, a));
            self.admission.as_mut().expect("admission").on_dispatch(r);
        }
        let plans = self.routines[r].actions[a].plans.clone().expect("plans");
        let inst = ActionInstance::new(&key, dev_id, &spec.action, plans.q_w, MilestoneMap::status_field(), plans.detection.clone(), now)
            .map_err(|e| SimError::Config(e.to_string()))?;
        let ack_deadline = inst.ack_deadline();
        self.routines[r].actions[a].inst = Some(inst);
        self.push(ack_deadline, Ev::AckTimeout(r, a));

        // Device side.
        let net = self.cfg.network_delay;
        let arrive = now + net;
        let busy = self.busy_until[dev_id];
        let rt = &mut self.routines[r].actions[a];
        let mut phys = Vec::new();
        if busy > arrive + EPS && dev.busy_policy == BusyPolicy::Reject {
            self.trace.push(now, "reject", self.payload(r, a));
        } else {
            let ack_at = arrive + dev.ack_latency;
            phys.push((ack_at + net, Ev::Ack(r, a)));
            if !rt.stalled {
                let begin = if dev.busy_policy == BusyPolicy::Queue { ack_at.max(busy) } else { ack_at };
                let start = begin + rt.d1;
                let complete = start + rt.d2 + rt.freeze_len();
                rt.phys_start = Some(start);
                rt.phys_complete = Some(complete);
                phys.push((start, Ev::PhysStart(r, a)));
                if let Some((f, _)) = rt.freeze {
                    phys.push((start + f * rt.d2, Ev::Interrupt(r, a)));
                }
                phys.push((complete, Ev::PhysComplete(r, a)));
                self.busy_until.insert(dev_id.to_string(), complete);
            }
        }
        for (t, ev) in phys {
            self.push(t, ev);
        }

        if let Some(sid) = self.sid_of[r] {
            self.sched.start_action(sid, a, now);
            if !verify_safety(&self.sched.timelines) {
                self.checks.safety_violations += 1;
            }
            let end = self.sched.slot(sid, a).map_or(now, |s| s.end);
            let thr = self.cfg.resched.reactive_threshold;
            let rt = &self.routines[r].actions[a];
            let mut check = end + thr;
            if rt.reports_progress {
                let proactive = now + self.cfg.resched.proactive_fraction * (plans.estimate.ack + plans.u1 + plans.u2);
                check = check.min(proactive.max(now));
            }
            let epoch = rt.late_epoch;
            self.push(check, Ev::LateCheck(r, a, epoch));
        }
        Ok(())
    }
}


/// Runs `f` and reports its wall time in seconds. Browsers have no monotonic
/// clock in std, so there the time is reported as zero.
fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    #[cfg(not(target_arch = "wasm32"))]
    {
        let clock = std::time::Instant::now();
        let v = f();
        (v, clock.elapsed().as_secs_f64())
    }
    #[cfg(target_arch = "wasm32")]
    {
        (f(), 0.0)
    }
}
