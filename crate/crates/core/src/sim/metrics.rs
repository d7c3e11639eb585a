//! Evaluation metrics computed from a trace alone.
//!
//! Occupancy is the hub's view: a device is busy with an action from its
//! request until the hub learns the action completed or failed.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::trace::SimTrace;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub q50: f64,
    pub q95: f64,
}

impl Stat {
    /// Mean and linearly interpolated quantiles; all zero when empty.
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Stat { n: v.len(), mean: v.iter().sum::<f64>() / v.len() as f64, q50: quantile(&v, 0.5), q95: quantile(&v, 0.95) }
    }
}

/// `sorted` must be non-empty and ascending.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub routines: usize,
    pub actions: usize,
    /// Last terminal milestone minus first arrival.
    pub schedule_length: Stat,
    /// Per action: request minus the time its dependencies allowed it.
    pub wait_time: Stat,
    /// Per device: unoccupied time between its first request and last terminal milestone.
    pub idle_time: Stat,
    /// Per routine: last milestone minus arrival.
    pub latency: Stat,
    /// Time-average number of occupied devices while at least one is occupied.
    pub parallelism: Stat,
    /// Absent when no milestone was actually observed.
    pub start_detection: Option<Stat>,
    pub complete_detection: Option<Stat>,
    pub polls_per_action: Option<Stat>,
    /// Failures declared for actions that physically completed.
    pub false_failures: usize,
    pub false_positive_rate: f64,
    pub reschedules: usize,
}

impl MetricsReport {
    /// Named scalar views, `None` where the metric is absent.
    pub fn scalars(&self) -> Vec<(String, Option<f64>)> {
        let mut out = Vec::new();
        let mut stat = |name: &str, s: Option<Stat>| {
            for (suffix, f) in [("mean", 0), ("q50", 1), ("q95", 2)] {
                let v = s.map(|s| [s.mean, s.q50, s.q95][f]);
                out.push((format!("{name}_{suffix}"), v));
            }
        };
        stat("schedule_length", Some(self.schedule_length));
        stat("wait_time", Some(self.wait_time));
        stat("idle_time", Some(self.idle_time));
        stat("latency", Some(self.latency));
        stat("parallelism", Some(self.parallelism));
        stat("start_detection", self.start_detection);
        stat("complete_detection", self.complete_detection);
        stat("polls_per_action", self.polls_per_action);
        out.push(("false_positive_rate".into(), Some(self.false_positive_rate)));
        out.push(("reschedules".into(), Some(self.reschedules as f64)));
        out
    }
}

fn union_length(intervals: &mut [(f64, f64)]) -> f64 {
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for &(s, e) in intervals.iter() {
        match cur {
            Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                cur = Some((s, e));
            }
            None => cur = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = cur {
        total += ce - cs;
    }
    total
}

pub fn compute_metrics(trace: &SimTrace) -> MetricsReport {
    let mut arrivals: BTreeMap<usize, f64> = BTreeMap::new();
    let mut last_milestone: BTreeMap<usize, f64> = BTreeMap::new();
    let mut ready: BTreeMap<(usize, String), f64> = BTreeMap::new();
    let mut waits = Vec::new();
    let mut requested: BTreeSet<(usize, String)> = BTreeSet::new();
    let mut phys: BTreeMap<(&str, (usize, String)), f64> = BTreeMap::new();
    let mut detected: Vec<(&str, (usize, String), f64)> = Vec::new();
    let mut polls: BTreeMap<(usize, String), usize> = BTreeMap::new();
    let mut failures: Vec<(usize, String)> = Vec::new();
    let mut observed_any = false;
    let mut first_arrival = f64::INFINITY;
    let mut last_terminal = f64::NEG_INFINITY;
    let mut reschedules = 0;

    for e in &trace.events {
        let key = e.action_key();
        match e.kind.as_str() {
            "arrival" => {
                if let Some(r) = e.routine() {
                    arrivals.insert(r, e.t);
                    first_arrival = first_arrival.min(e.t);
                }
            }
            "ready" => {
                if let Some(k) = key {
                    ready.entry(k).or_insert(e.t);
                }
            }
            "request" => {
                if let Some(k) = key {
                    if let Some(r) = ready.get(&k) {
                        waits.push((e.t - r).max(0.0));
                    }
                    polls.entry(k.clone()).or_insert(0);
                    requested.insert(k);
                }
            }
            "poll" => {
                if let Some(k) = key {
                    *polls.entry(k).or_insert(0) += 1;
                }
            }
            "phys_start" | "phys_complete" => {
                if let Some(k) = key {
                    let which = if e.kind == "phys_start" { "start" } else { "complete" };
                    phys.insert((which, k), e.t);
                }
            }
            "start" | "complete" | "failure" | "dead" => {
                if let Some(k) = key {
                    let r = k.0;
                    let lm = last_milestone.entry(r).or_insert(e.t);
                    *lm = lm.max(e.t);
                    let assumed = e.payload.get("assumed").and_then(|v| v.as_bool()).unwrap_or(false);
                    if e.kind != "dead" && !assumed {
                        observed_any = true;
                    }
                    match e.kind.as_str() {
                        "start" | "complete" if !assumed => detected.push((if e.kind == "start" { "start" } else { "complete" }, k, e.t)),
                        "failure" => failures.push(k),
                        _ => {}
                    }
                    if e.kind == "complete" || e.kind == "failure" {
                        last_terminal = last_terminal.max(e.t);
                    }
                }
            }
            "reschedule" => reschedules += 1,
            _ => {}
        }
    }

    let latencies: Vec<f64> = arrivals.iter().filter_map(|(r, a)| last_milestone.get(r).map(|m| (m - a).max(0.0))).collect();
    let schedule_length = if last_terminal.is_finite() && first_arrival.is_finite() { (last_terminal - first_arrival).max(0.0) } else { 0.0 };

    let busy = trace.busy_intervals();
    let mut idle = Vec::new();
    let mut all = Vec::new();
    let mut occupied_total = 0.0;
    for iv in busy.values() {
        let lo = iv.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
        let hi = iv.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        let mut v = iv.clone();
        let u = union_length(&mut v);
        idle.push((hi - lo - u).max(0.0));
        occupied_total += u;
        all.extend_from_slice(iv);
    }
    let horizon = union_length(&mut all);
    let parallelism = if horizon > 0.0 { occupied_total / horizon } else { 0.0 };

    let mut start_det = Vec::new();
    let mut complete_det = Vec::new();
    for (which, k, t) in detected {
        if let Some(p) = phys.get(&(which, k)) {
            let d = (t - p).max(0.0);
            if which == "start" {
                start_det.push(d);
            } else {
                complete_det.push(d);
            }
        }
    }
    let false_failures = failures.iter().filter(|k| phys.contains_key(&("complete", (*k).clone()))).count();
    let poll_counts: Vec<f64> = polls.values().map(|&c| c as f64).collect();
    let actions = requested.len();

    MetricsReport {
        routines: arrivals.len(),
        actions,
        schedule_length: if arrivals.is_empty() { Stat::default() } else { Stat::of(&[schedule_length]) },
        wait_time: Stat::of(&waits),
        idle_time: Stat::of(&idle),
        latency: Stat::of(&latencies),
        parallelism: if horizon > 0.0 { Stat::of(&[parallelism]) } else { Stat::default() },
        start_detection: observed_any.then(|| Stat::of(&start_det)),
        complete_detection: observed_any.then(|| Stat::of(&complete_det)),
        polls_per_action: observed_any.then(|| Stat::of(&poll_counts)),
        false_failures,
        false_positive_rate: if actions > 0 { false_failures as f64 / actions as f64 } else { 0.0 },
        reschedules,
    }
}
