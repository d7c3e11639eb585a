//! Deterministic discrete-event simulation of devices, actions and routines.
//!
//! Ground truth (how long each action physically takes) is drawn from the
//! devices' duration models. The simulated hub only sees what it learned in a
//! training phase and what its polls or pushes report.

mod engine;
pub mod metrics;
pub mod polling;
pub mod trace;
pub mod workload;

pub use engine::{run, RunChecks, SimOutput, SimRun};
pub use metrics::{compute_metrics, MetricsReport, Stat};
pub use trace::{SimTrace, TraceEvent};
pub use workload::{devices_from_json, office_devices, random_routines, ArrivalProcess, RoutineGen, Workload, WorkloadItem, WorkloadSpec};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{DistError, TraceError};
use crate::pollplan::PlanError;
use crate::resched::ReschedConfig;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("simulation did not settle after {0} events")]
    Runaway(usize),
}

/// Ground-truth duration generator, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DurationModel {
    Fixed { s: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Truncated below at `min`.
    Normal { mean: f64, sd: f64, #[serde(default)] min: f64 },
    Exponential { mean: f64 },
    /// Two-component normal mixture; `weight` is the first component's share.
    Bimodal { weight: f64, a: (f64, f64), b: (f64, f64) },
    /// Resamples recorded values uniformly.
    Samples { values: Vec<f64> },
}

impl DurationModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = match self {
            DurationModel::Fixed { s } => *s >= 0.0 && s.is_finite(),
            DurationModel::Uniform { lo, hi } => *lo >= 0.0 && hi > lo && hi.is_finite(),
            DurationModel::Normal { mean, sd, min } => mean.is_finite() && *sd >= 0.0 && sd.is_finite() && *min >= 0.0,
            DurationModel::Exponential { mean } => *mean > 0.0 && mean.is_finite(),
            DurationModel::Bimodal { weight, a, b } => (0.0..=1.0).contains(weight) && a.1 >= 0.0 && b.1 >= 0.0 && a.0.is_finite() && b.0.is_finite(),
            DurationModel::Samples { values } => !values.is_empty() && values.iter().all(|v| *v >= 0.0 && v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Config(format!("invalid duration model {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let normal = |rng: &mut R, m: f64, sd: f64| if sd > 0.0 { Normal::new(m, sd).expect("sd > 0").sample(rng) } else { m };
        let v = match self {
            DurationModel::Fixed { s } => *s,
            DurationModel::Uniform { lo, hi } => rng.random_range(*lo..*hi),
            DurationModel::Normal { mean, sd, min } => normal(rng, *mean, *sd).max(*min),
            DurationModel::Exponential { mean } => Exp::new(1.0 / mean).expect("mean > 0").sample(rng),
            DurationModel::Bimodal { weight, a, b } => {
                let (m, sd) = if rng.random::<f64>() < *weight { *a } else { *b };
                normal(rng, m, sd)
            }
            DurationModel::Samples { values } => values[rng.random_range(0..values.len())],
        };
        v.max(0.0)
    }
}

/// One action kind a device supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionModel {
    pub ack_to_start: DurationModel,
    pub start_to_complete: DurationModel,
    /// Whether polls report a progress fraction while running.
    #[serde(default)]
    pub reports_progress: bool,
    /// Probability that the action never starts.
    #[serde(default)]
    pub fail_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceMode {
    #[default]
    Pull,
    Push,
}

/// What a device does with a request while it is still physically busy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusyPolicy {
    /// Drops the request without an ack.
    #[default]
    Reject,
    /// Acks and runs it after the current action, first in first out.
    Queue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualDevice {
    pub device_id: String,
    /// Action class used for trained distributions and `Q_w` lookup.
    pub class: String,
    #[serde(default)]
    pub mode: DeviceMode,
    #[serde(default = "default_min_poll")]
    pub min_poll_interval: f64,
    #[serde(default)]
    pub busy_policy: BusyPolicy,
    /// Time from receiving a request to sending the ack.
    #[serde(default = "default_ack_latency")]
    pub ack_latency: f64,
    pub actions: BTreeMap<String, ActionModel>,
}

fn default_min_poll() -> f64 {
    0.1
}

fn default_ack_latency() -> f64 {
    0.05
}

impl VirtualDevice {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.device_id.is_empty() || self.class.is_empty() {
            return Err(SimError::Config("device needs an id and a class".into()));
        }
        if !(self.min_poll_interval >= 0.0 && self.ack_latency >= 0.0) {
            return Err(SimError::Config(format!("device {}: negative timing", self.device_id)));
        }
        for (name, a) in &self.actions {
            a.ack_to_start.validate()?;
            a.start_to_complete.validate()?;
            if !(0.0..=1.0).contains(&a.fail_prob) {
                return Err(SimError::Config(format!("device {}/{name}: fail_prob outside [0, 1]", self.device_id)));
            }
        }
        Ok(())
    }
}

/// Freezes physical progress of one action for `duration` seconds once it
/// reaches `at_fraction` of its run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interruption {
    /// Index of the routine in the workload.
    pub routine: usize,
    pub action: String,
    pub at_fraction: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PollingPolicy {
    #[default]
    Adaptive,
    Periodic,
    /// Milestones are assumed at the learned upper bounds; nothing is polled.
    NoPolling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulingPolicy {
    #[default]
    DagtlStf,
    DagtlRv,
    Fcfs,
    FcfsPost,
    Jit,
}

impl SchedulingPolicy {
    pub const ALL: [SchedulingPolicy; 5] =
        [SchedulingPolicy::DagtlStf, SchedulingPolicy::DagtlRv, SchedulingPolicy::Fcfs, SchedulingPolicy::FcfsPost, SchedulingPolicy::Jit];

    pub fn is_dagtl(self) -> bool {
        matches!(self, SchedulingPolicy::DagtlStf | SchedulingPolicy::DagtlRv)
    }

    pub fn label(self) -> &'static str {
        match self {
            SchedulingPolicy::DagtlStf => "dagtl_stf",
            SchedulingPolicy::DagtlRv => "dagtl_rv",
            SchedulingPolicy::Fcfs => "fcfs",
            SchedulingPolicy::FcfsPost => "fcfs_post",
            SchedulingPolicy::Jit => "jit",
        }
    }
}

/// Default detection window for an action class.
pub fn default_q_w(class: &str) -> f64 {
    match class {
        "door" => 2.0,
        "shade" => 3.0,
        "thermostat" => 30.0,
        _ => 5.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    #[serde(default)]
    pub polling: PollingPolicy,
    #[serde(default)]
    pub scheduling: SchedulingPolicy,
    #[serde(default = "default_slo")]
    pub slo: f64,
    /// Overrides of [`default_q_w`] by action class.
    #[serde(default)]
    pub q_w: BTreeMap<String, f64>,
    #[serde(default)]
    pub resched: ReschedConfig,
    /// Each sampled duration is scaled by a factor uniform in `1 ± perturbation`.
    #[serde(default)]
    pub perturbation: f64,
    /// One-way hub to device delay.
    #[serde(default)]
    pub network_delay: f64,
    /// Ground-truth draws per transition the hub trains on.
    #[serde(default = "default_training")]
    pub training_samples: usize,
    #[serde(default)]
    pub interruptions: Vec<Interruption>,
}

fn default_slo() -> f64 {
    0.9
}

fn default_training() -> usize {
    60
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            polling: PollingPolicy::Adaptive,
            scheduling: SchedulingPolicy::DagtlStf,
            slo: default_slo(),
            q_w: BTreeMap::new(),
            resched: ReschedConfig::default(),
            perturbation: 0.0,
            network_delay: 0.0,
            training_samples: default_training(),
            interruptions: Vec::new(),
        }
    }
}

impl PolicyConfig {
    pub fn with(polling: PollingPolicy, scheduling: SchedulingPolicy) -> Self {
        PolicyConfig { polling, scheduling, ..PolicyConfig::default() }
    }

    pub fn q_w_for(&self, class: &str) -> f64 {
        self.q_w.get(class).copied().unwrap_or_else(|| default_q_w(class))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.slo > 0.0 && self.slo <= 1.0) {
            return Err(SimError::Config(format!("slo must lie in (0, 1], got {}", self.slo)));
        }
        if !(0.0..1.0).contains(&self.perturbation) || !(self.network_delay >= 0.0) {
            return Err(SimError::Config("perturbation must lie in [0, 1) and network delay be non-negative".into()));
        }
        if let Some((c, q)) = self.q_w.iter().find(|(_, q)| !(**q > 0.0 && q.is_finite())) {
            return Err(SimError::Config(format!("Q_w for {c} must be positive, got {q}")));
        }
        if self.training_samples < crate::dist::MIN_SAMPLES_PER_KEY {
            return Err(SimError::Config("training needs at least three samples per transition".into()));
        }
        Ok(())
    }
}
