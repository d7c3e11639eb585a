//! Smallest poll count meeting a detection SLO.

use super::{
    coverage, gaps_at_least, gaps_within, schedule_for, solve_recurrence, PlanError, PollSchedule,
};
use crate::dist::Density;

/// Upper bound on how many times the search may double `k`.
const MAX_DOUBLINGS: usize = 64;
/// Poll counts beyond this are treated as infeasible.
const MAX_K: usize = 1 << 16;

#[derive(Debug, Clone, Copy)]
pub struct PollPlanRequest<'a> {
    pub dist: &'a Density,
    pub u: f64,
    pub q_w: f64,
    pub slo: f64,
    pub min_poll_interval: f64,
    pub epsilon: f64,
}

impl<'a> PollPlanRequest<'a> {
    pub fn new(dist: &'a Density, u: f64, q_w: f64, slo: f64) -> Self {
        PollPlanRequest { dist, u, q_w, slo, min_poll_interval: 0.0, epsilon: 1e-5 }
    }

    pub fn min_poll_interval(mut self, v: f64) -> Self {
        self.min_poll_interval = v;
        self
    }

    fn validate(&self) -> Result<(), PlanError> {
        if !(self.q_w > 0.0 && self.q_w.is_finite()) {
            return Err(PlanError::InvalidRequest(format!("Q_w must be positive, got {}", self.q_w)));
        }
        if !(self.slo > 0.0 && self.slo <= 1.0) {
            return Err(PlanError::InvalidRequest(format!("slo must lie in (0, 1], got {}", self.slo)));
        }
        if !(self.u > 0.0 && self.u.is_finite()) {
            return Err(PlanError::InvalidRequest(format!("U must be positive, got {}", self.u)));
        }
        if !(self.min_poll_interval >= 0.0) || !(self.epsilon > 0.0) {
            return Err(PlanError::InvalidRequest("min_poll_interval >= 0 and epsilon > 0 required".into()));
        }
        if self.q_w < self.min_poll_interval {
            return Err(PlanError::Unsupportable { q_w: self.q_w, min_interval: self.min_poll_interval });
        }
        Ok(())
    }

    /// Best passing placement for `k` polls, if any.
    ///
    /// Candidates are the recurrence placement and equal spacing; the one
    /// with the lower expected delay wins.
    fn attempt(&self, k: usize) -> Option<PollSchedule> {
        if k == 0 {
            return None;
        }
        let mut candidates = Vec::with_capacity(2);
        if let Ok(s) = solve_recurrence(self.dist, k, self.u, self.epsilon) {
            candidates.push(s);
        }
        let even: Vec<f64> = (1..=k).map(|i| self.u * i as f64 / k as f64).collect();
        if let Ok(s) = schedule_for(self.dist, even, self.u, None) {
            candidates.push(s);
        }
        candidates
            .into_iter()
            .filter_map(|mut s| {
                if !gaps_at_least(&s.polls, self.min_poll_interval) {
                    return None;
                }
                let cov = coverage(self.dist, &s.polls, self.q_w).ok()?;
                s.coverage = Some(cov);
                let pass = if self.slo >= 1.0 { gaps_within(&s.polls, self.q_w) } else { cov >= self.slo - 1e-12 };
                pass.then_some(s)
            })
            .min_by(|a, b| a.expected_detection.partial_cmp(&b.expected_detection).unwrap_or(std::cmp::Ordering::Equal))
    }
}

/// Smallest `k` whose placement meets the SLO.
///
/// With `slo = 1` every gap, including the lead-in from 0, must be at most
/// `Q_w`; otherwise the covered mass must reach `slo`. A lower-bound binary
/// search keeps `attempt(lo)` failing and `attempt(hi)` passing.
pub fn find_polls(req: &PollPlanRequest<'_>) -> Result<PollSchedule, PlanError> {
    req.validate()?;
    let mut lo = 0usize;
    let mut hi = ((req.u / req.q_w).ceil() as usize).max(1);
    let mut best = req.attempt(hi);
    let mut doublings = 0;
    while best.is_none() {
        doublings += 1;
        if doublings > MAX_DOUBLINGS || hi >= MAX_K {
            return Err(PlanError::NoFeasibleCount { max_k: hi });
        }
        lo = hi;
        hi = (hi * 2).min(MAX_K);
        best = req.attempt(hi);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        match req.attempt(mid) {
            Some(s) => {
                hi = mid;
                best = Some(s);
            }
            None => lo = mid,
        }
    }
    Ok(best.expect("hi always holds a passing placement"))
}
