//! Poll placement for one transition phase.
//!
//! A plan is a strictly increasing list of offsets from the start of the
//! phase. The last planned poll sits at the phase bound `U`; anything past it
//! is handled by [`post_u_plan`].

mod baseline;
mod post_u;
mod recurrence;
mod search;

pub use baseline::{periodic_plan, vopt_plan};
pub use post_u::{post_u_plan, PostUDecision, PostUState};
pub use recurrence::{second_order_check, solve_recurrence};
pub use search::{find_polls, PollPlanRequest};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{Density, DistError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("no placement of {k} polls reaches U = {u} within tolerance")]
    Infeasible { k: usize, u: f64 },
    #[error("no poll count up to {max_k} meets the SLO")]
    NoFeasibleCount { max_k: usize },
    #[error("detection window {q_w}s is below the device minimum poll interval {min_interval}s")]
    Unsupportable { q_w: f64, min_interval: f64 },
    #[error("invalid plan request: {0}")]
    InvalidRequest(String),
    #[error("polls must be positive and strictly increasing")]
    UnorderedPolls,
}

/// Outcome of the second-order check on a recurrence placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderCheck {
    pub values: Vec<f64>,
    pub all_nonnegative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollSchedule {
    pub polls: Vec<f64>,
    pub u: f64,
    pub expected_detection: Option<f64>,
    pub coverage: Option<f64>,
    /// Second-order conditions held at every poll.
    pub valid_minimum: bool,
    /// The optimiser replaced a zero density with its floor somewhere.
    pub density_floored: bool,
}

impl PollSchedule {
    pub fn k(&self) -> usize {
        self.polls.len()
    }

    /// Plan export `{key, U, Q_w, slo, k, polls, expected_detection, coverage}`.
    pub fn export(&self, key: &str, q_w: f64, slo: f64) -> PlanExport {
        PlanExport {
            key: key.to_string(),
            u: self.u,
            q_w,
            slo,
            k: self.k(),
            polls: self.polls.clone(),
            expected_detection: self.expected_detection,
            coverage: self.coverage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanExport {
    pub key: String,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "Q_w")]
    pub q_w: f64,
    pub slo: f64,
    pub k: usize,
    pub polls: Vec<f64>,
    pub expected_detection: Option<f64>,
    pub coverage: Option<f64>,
}

/// Density as seen by the optimiser: floored so the recurrence never divides
/// by zero.
pub(crate) struct FlooredDensity<'a> {
    pub d: &'a Density,
    floor: f64,
    floored: std::cell::Cell<bool>,
}

impl<'a> FlooredDensity<'a> {
    pub fn new(d: &'a Density, u: f64) -> Self {
        FlooredDensity { d, floor: 1e-9 / u.max(f64::MIN_POSITIVE), floored: std::cell::Cell::new(false) }
    }

    pub fn pdf(&self, t: f64) -> f64 {
        let p = self.d.pdf(t);
        if p < self.floor {
            self.floored.set(true);
            self.floor
        } else {
            p
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        self.d.cdf(t)
    }

    pub fn floored(&self) -> bool {
        self.floored.get()
    }
}

fn check_polls(polls: &[f64]) -> Result<(), PlanError> {
    let ordered = polls.first().is_some_and(|p| *p > 0.0) && polls.windows(2).all(|w| w[1] > w[0]);
    if ordered && polls.iter().all(|p| p.is_finite()) {
        Ok(())
    } else {
        Err(PlanError::UnorderedPolls)
    }
}

/// Expected detection delay of an event inside `(0, L_k]`:
/// `Σ L_i (F(L_i) - F(L_{i-1})) - ∫_0^{L_k} t p(t) dt`.
pub fn expected_detection(d: &Density, polls: &[f64]) -> Result<f64, PlanError> {
    check_polls(polls)?;
    let mut prev_f = 0.0;
    let mut q = 0.0;
    for &l in polls {
        let f = d.cdf(l);
        q += l * (f - prev_f);
        prev_f = f;
    }
    Ok(q - d.partial_moment(*polls.last().unwrap()))
}

/// Probability that an event in `(0, L_k]` lands within `q_w` before some poll.
///
/// Normalised by `F(L_k)`; events after the last poll are the post-U path's
/// concern.
pub fn coverage(d: &Density, polls: &[f64], q_w: f64) -> Result<f64, PlanError> {
    check_polls(polls)?;
    let last = *polls.last().unwrap();
    let total = d.cdf(last);
    if total <= 0.0 {
        return Ok(0.0);
    }
    let mut covered = 0.0;
    let mut reach = 0.0_f64;
    for &l in polls {
        let lo = (l - q_w).max(reach).max(0.0);
        if l > lo {
            covered += d.cdf(l) - d.cdf(lo);
        }
        reach = reach.max(l);
    }
    Ok((covered / total).clamp(0.0, 1.0))
}

/// True when every gap, including the one from 0 to the first poll, is at most `q_w`.
pub(crate) fn gaps_within(polls: &[f64], q_w: f64) -> bool {
    let mut prev = 0.0;
    polls.iter().all(|&p| {
        let ok = p - prev <= q_w * (1.0 + 1e-9);
        prev = p;
        ok
    })
}

pub(crate) fn gaps_at_least(polls: &[f64], min_gap: f64) -> bool {
    let mut prev = 0.0;
    polls.iter().all(|&p| {
        let ok = p - prev >= min_gap * (1.0 - 1e-9);
        prev = p;
        ok
    })
}

fn schedule_for(d: &Density, polls: Vec<f64>, u: f64, q_w: Option<f64>) -> Result<PollSchedule, PlanError> {
    let expected = expected_detection(d, &polls)?;
    let cov = match q_w {
        Some(q) => Some(coverage(d, &polls, q)?),
        None => None,
    };
    Ok(PollSchedule {
        polls,
        u,
        expected_detection: Some(expected),
        coverage: cov,
        valid_minimum: false,
        density_floored: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{EmpiricalDistribution, FitConfig};

    pub(crate) fn exact_uniform(hi: f64) -> EmpiricalDistribution {
        EmpiricalDistribution::from_bins(hi / 64.0, &[1.0; 64], 1000).unwrap()
    }

    #[test]
    fn uniform_five_polls_detect_in_one_second() {
        let u = exact_uniform(10.0);
        let q = expected_detection(u.density().unwrap(), &[2.0, 4.0, 6.0, 8.0, 10.0]).unwrap();
        assert!((q - 1.0).abs() < 0.05, "{q}");
    }

    #[test]
    fn single_poll_at_support_end_is_gap_to_mean() {
        let s: Vec<f64> = (0..500).map(|i| 2.0 + (i % 17) as f64 * 0.3).collect();
        let d = EmpiricalDistribution::fit(&s, FitConfig::default()).unwrap();
        let d = d.density().unwrap();
        let end = d.support_end();
        let q = expected_detection(d, &[end]).unwrap();
        assert!((q - (end - d.mean())).abs() < 1e-9);
    }

    #[test]
    fn point_mass_detected_within_a_bin() {
        let d = EmpiricalDistribution::fit(&[3.0; 30], FitConfig::default()).unwrap();
        let d = d.density().unwrap();
        let q = expected_detection(d, &[3.0]).unwrap();
        assert!(q >= 0.0 && q <= d.bin_width(), "{q}");
    }

    #[test]
    fn rejects_unordered_polls() {
        let u = exact_uniform(10.0);
        let d = u.density().unwrap();
        assert_eq!(expected_detection(d, &[3.0, 2.0]), Err(PlanError::UnorderedPolls));
        assert_eq!(expected_detection(d, &[]), Err(PlanError::UnorderedPolls));
    }

    #[test]
    fn coverage_of_dense_polls_is_complete() {
        let u = exact_uniform(10.0);
        let d = u.density().unwrap();
        assert!((coverage(d, &[2.0, 4.0, 6.0, 8.0, 10.0], 2.0).unwrap() - 1.0).abs() < 1e-12);
        let half = coverage(d, &[5.0, 10.0], 2.5).unwrap();
        assert!((half - 0.5).abs() < 1e-12);
    }
}
