//! Polling after the phase bound `U` has passed without the awaited change.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PostUDecision {
    /// Poll again after this many seconds.
    PollAfter(f64),
    FailureDeclared,
}

/// Backoff and deadline state for one phase.
///
/// Times are offsets from the phase origin. The deadline starts at
/// `U + Q_w` and moves out only when reported progress increases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostUState {
    q_w: f64,
    base_gap: f64,
    next_gap: f64,
    deadline: f64,
    last_progress: Option<f64>,
}

impl PostUState {
    /// `base_gap` is clamped into `(0, q_w]`.
    pub fn new(u: f64, q_w: f64, base_gap: f64, last_progress: Option<f64>) -> Self {
        let base = if base_gap > 0.0 { base_gap.min(q_w) } else { q_w };
        PostUState { q_w, base_gap: base, next_gap: base, deadline: u + q_w, last_progress }
    }

    pub fn deadline(&self) -> f64 {
        self.deadline
    }
}

/// Decides the next step at offset `elapsed` after a poll that did not show
/// the awaited change.
///
/// Progress `p` counts as evidence only if it grew since the last reading; the
/// remaining time is then extrapolated as `elapsed (1 - p) / p`, the deadline
/// moves out by that estimate and the next poll lands at `min(estimate, Q_w)`.
/// Without evidence the gap doubles from the base up to `Q_w`, and the last
/// poll is truncated so it lands exactly on the deadline.
pub fn post_u_plan(state: &mut PostUState, elapsed: f64, progress: Option<f64>) -> PostUDecision {
    let evidence = match (progress, state.last_progress) {
        (Some(p), last) if p > 0.0 && p < 1.0 => last.is_none_or(|l| p > l + 1e-12),
        _ => false,
    };
    if evidence {
        let p = progress.unwrap();
        state.last_progress = Some(p);
        let estimate = elapsed.max(0.0) * (1.0 - p) / p;
        state.deadline = state.deadline.max(elapsed) + estimate;
        state.next_gap = state.base_gap;
        return PostUDecision::PollAfter(estimate.min(state.q_w).max(state.base_gap));
    }
    if let Some(p) = progress {
        state.last_progress = Some(state.last_progress.map_or(p, |l| l.max(p)));
    }
    let remaining = state.deadline - elapsed;
    if remaining <= 1e-9 {
        return PostUDecision::FailureDeclared;
    }
    let gap = state.next_gap.min(remaining);
    state.next_gap = (state.next_gap * 2.0).min(state.q_w);
    PostUDecision::PollAfter(gap)
}
