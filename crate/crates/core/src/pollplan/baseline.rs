//! Reference placements: fixed-period polling and V-optimal bucket edges.

use super::{schedule_for, PlanError, PollSchedule};
use crate::dist::Density;

/// Polls every `q_w` seconds until `u` is reached or passed.
pub fn periodic_plan(u: f64, q_w: f64) -> Result<PollSchedule, PlanError> {
    if !(u > 0.0 && q_w > 0.0) || !u.is_finite() || !q_w.is_finite() {
        return Err(PlanError::InvalidRequest(format!("need U > 0 and Q_w > 0, got U={u}, Q_w={q_w}")));
    }
    let k = ((u / q_w) - 1e-9).ceil().max(1.0) as usize;
    Ok(PollSchedule {
        polls: (1..=k).map(|i| i as f64 * q_w).collect(),
        u,
        expected_detection: None,
        coverage: Some(1.0),
        valid_minimum: false,
        density_floored: false,
    })
}

/// V-optimal partition of the bins up to `u` into `k` buckets; polls go at
/// bucket right edges and the last one at `u`.
///
/// Minimises the within-bucket sum of squared deviations of bin masses.
/// Ties resolve to the leftmost last cut, then recursively leftward.
pub fn vopt_plan(d: &Density, k: usize, u: f64) -> Result<PollSchedule, PlanError> {
    if k == 0 {
        return Err(PlanError::InvalidRequest("k must be positive".into()));
    }
    if !(u > 0.0 && u.is_finite()) {
        return Err(PlanError::InvalidRequest(format!("U must be positive, got {u}")));
    }
    let width = d.bin_width();
    let m = (((u / width) - 1e-9).ceil() as usize).clamp(1, d.bin_count());
    if k > m {
        return Err(PlanError::InvalidRequest(format!("k = {k} exceeds the {m} bins below U")));
    }
    let splits = vopt_splits(&d.bin_mass()[..m], k);
    let mut polls: Vec<f64> = splits.iter().map(|&end| end as f64 * width).collect();
    polls.push(u);
    polls.dedup_by(|a, b| *a <= *b);
    schedule_for(d, polls, u, None)
}

/// Bucket end indices (exclusive) of the first `k - 1` buckets.
pub(crate) fn vopt_splits(mass: &[f64], k: usize) -> Vec<usize> {
    let n = mass.len();
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, &m) in mass.iter().enumerate() {
        s1[i + 1] = s1[i] + m;
        s2[i + 1] = s2[i] + m * m;
    }
    let sse = |i: usize, j: usize| {
        let len = (j - i) as f64;
        let s = s1[j] - s1[i];
        (s2[j] - s2[i] - s * s / len).max(0.0)
    };
    // cost[b][j]: best cost of splitting mass[..j] into b buckets.
    let inf = f64::INFINITY;
    let mut cost = vec![vec![inf; n + 1]; k + 1];
    let mut arg = vec![vec![0usize; n + 1]; k + 1];
    cost[0][0] = 0.0;
    for b in 1..=k {
        for j in b..=n {
            let mut best = inf;
            let mut at = b - 1;
            for i in (b - 1)..j {
                let c = cost[b - 1][i] + sse(i, j);
                if c < best - 1e-15 {
                    best = c;
                    at = i;
                }
            }
            cost[b][j] = best;
            arg[b][j] = at;
        }
    }
    let mut ends = Vec::with_capacity(k);
    let mut j = n;
    for b in (1..=k).rev() {
        let i = arg[b][j];
        if b > 1 {
            ends.push(i);
        }
        j = i;
    }
    ends.reverse();
    ends
}
