//! Single-transition polling trials.
//!
//! Each trial runs one ack to start phase of a fresh [`ActionInstance`]: the
//! phase opens at time zero, the device flips to `running` once the sampled
//! transition time has elapsed, and the hub follows its poll plan. Isolating
//! the phase makes the origin exact, so detection delay is measured without
//! ack jitter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::Stat;
use super::SimError;
use crate::dist::EmpiricalDistribution;
use crate::lifecycle::{ActionInstance, ActionState, DeviceState, Detection, EventKind, MilestoneMap, PhasePlan, StateValue};
use crate::pollplan::{find_polls, periodic_plan, vopt_plan, PollPlanRequest, PollSchedule};

/// Guard against a plan that never terminates a trial.
const MAX_POLLS_PER_TRIAL: u32 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    Adaptive,
    Periodic,
    /// V-optimal edges with as many polls as the adaptive plan uses.
    VOpt,
}

/// Progress stalls at `at_fraction` for `duration` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Freeze {
    pub at_fraction: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub plan: PlanKind,
    pub q_w: f64,
    pub slo: f64,
    pub min_poll_interval: f64,
    /// Quantile of the learned model taken as the upper bound.
    pub u_quantile: f64,
    pub trials: usize,
    pub seed: u64,
    pub reports_progress: bool,
    pub freeze: Option<Freeze>,
}

impl TrialConfig {
    pub fn new(plan: PlanKind, q_w: f64, trials: usize, seed: u64) -> Self {
        TrialConfig { plan, q_w, slo: 0.9, min_poll_interval: 0.0, u_quantile: 0.99, trials, seed, reports_progress: false, freeze: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub plan: PollSchedule,
    pub trials: usize,
    /// Over trials where the transition was detected.
    pub detection: Stat,
    pub polls: Stat,
    /// Trials declared failed although the transition happened.
    pub false_failures: usize,
    /// Share of detected trials whose delay was at most `Q_w`.
    pub within_q_w: f64,
}

/// The plan a trial configuration puts on `learned`.
pub fn build_plan(learned: &EmpiricalDistribution, cfg: &TrialConfig) -> Result<PollSchedule, SimError> {
    let u = learned.ppf(cfg.u_quantile)?.max(1e-3);
    let adaptive = || -> Result<PollSchedule, SimError> {
        Ok(find_polls(&PollPlanRequest::new(learned.density()?, u, cfg.q_w, cfg.slo).min_poll_interval(cfg.min_poll_interval))?)
    };
    Ok(match cfg.plan {
        PlanKind::Adaptive => adaptive()?,
        PlanKind::Periodic => periodic_plan(u, cfg.q_w)?,
        PlanKind::VOpt => {
            let d = learned.density()?;
            let k = adaptive()?.k();
            let bins_below_u = ((u / d.bin_width()).ceil() as usize).clamp(1, d.bin_count());
            vopt_plan(d, k.clamp(1, bins_below_u), u)?
        }
    })
}

/// Progress `elapsed` seconds into a transition of nominal length `len`.
fn progress(elapsed: f64, len: f64, freeze: Option<Freeze>) -> f64 {
    if len <= 0.0 {
        return 1.0;
    }
    let p = match freeze {
        Some(f) if f.at_fraction < 1.0 && elapsed >= f.at_fraction * len => {
            if elapsed < f.at_fraction * len + f.duration {
                f.at_fraction
            } else {
                (elapsed - f.duration) / len
            }
        }
        _ => elapsed / len,
    };
    p.clamp(0.0, 1.0)
}

/// Outcome of one trial: `Ok(delay, polls)` or `Err(polls)` on a declared failure.
fn one_trial(plan: &PhasePlan, cfg: &TrialConfig, len: f64) -> Result<(f64, u32), u32> {
    let freeze = cfg.freeze.filter(|f| f.at_fraction < 1.0 && f.duration > 0.0);
    let happens_at = len + freeze.map_or(0.0, |f| f.duration);
    let detection = Detection::Polling {
        ack_to_start: plan.clone(),
        start_to_complete: PhasePlan { polls: vec![1.0], u: 1.0 },
        base_gap: (cfg.q_w / 4.0).max(cfg.min_poll_interval),
    };
    let mut inst = ActionInstance::new("trial", "dev", "act", cfg.q_w, MilestoneMap::status_field(), detection, 0.0).expect("Q_w validated");
    inst.on_ack(0.0);
    let text = |s: &str| StateValue::Text(s.to_string());
    while let Some(t) = inst.next_poll_at() {
        if inst.polls_issued() >= MAX_POLLS_PER_TRIAL {
            break;
        }
        let mut obs = DeviceState::default().with("status", text(if t >= happens_at { "running" } else { "acked" }));
        if cfg.reports_progress {
            obs = obs.with("progress", StateValue::Number(progress(t, len, freeze)));
        }
        for ev in inst.on_poll_result(&obs, t) {
            match ev.kind {
                EventKind::Start => return Ok(((t - happens_at).max(0.0), inst.polls_issued())),
                EventKind::Failure => return Err(inst.polls_issued()),
                _ => {}
            }
        }
        if inst.state() != ActionState::StartDetection {
            break;
        }
    }
    Err(inst.polls_issued())
}

/// Runs `cfg.trials` trials with transition lengths drawn by `truth`.
pub fn polling_trials(
    learned: &EmpiricalDistribution,
    cfg: &TrialConfig,
    mut truth: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> Result<TrialReport, SimError> {
    if !(cfg.q_w > 0.0 && cfg.q_w.is_finite()) {
        return Err(SimError::Config(format!("Q_w must be positive, got {}", cfg.q_w)));
    }
    let plan = build_plan(learned, cfg)?;
    let phase = PhasePlan::new(plan.polls.clone(), plan.u).map_err(|e| SimError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut delays = Vec::with_capacity(cfg.trials);
    let mut polls = Vec::with_capacity(cfg.trials);
    let mut false_failures = 0;
    for _ in 0..cfg.trials {
        let len = truth(&mut rng).max(0.0);
        match one_trial(&phase, cfg, len) {
            Ok((d, n)) => {
                delays.push(d);
                polls.push(n as f64);
            }
            Err(n) => {
                false_failures += 1;
                polls.push(n as f64);
            }
        }
    }
    let within = if delays.is_empty() { 0.0 } else { delays.iter().filter(|d| **d <= cfg.q_w + 1e-9).count() as f64 / delays.len() as f64 };
    Ok(TrialReport { plan, trials: cfg.trials, detection: Stat::of(&delays), polls: Stat::of(&polls), false_failures, within_q_w: within })
}

/// Trials whose ground truth is the learned model itself.
pub fn trials_on_learned(learned: &EmpiricalDistribution, cfg: &TrialConfig) -> Result<TrialReport, SimError> {
    polling_trials(learned, cfg, |rng| learned.sample(rng).expect("trained model"))
}
