//! Stationary placement of `k` polls.
//!
//! Setting each partial derivative of the expected detection delay to zero
//! gives `L_i = L_{i-1} + (F(L_{i-1}) - F(L_{i-2})) / p(L_{i-1})`, so the whole
//! placement follows from `L_1`, which is chosen so that `L_k = U`.

use super::{schedule_for, FlooredDensity, PlanError, PollSchedule, SecondOrderCheck};
use crate::dist::Density;

const BISECTION_STEPS: usize = 200;
const SCAN_POINTS: usize = 256;

enum Shot {
    /// Some `L_i` went past `U`.
    Over,
    /// All polls generated; the last one is below or near `U`.
    Done(Vec<f64>),
}

fn shoot(fd: &FlooredDensity<'_>, l1: f64, k: usize, u: f64, eps: f64) -> Shot {
    let mut polls = Vec::with_capacity(k);
    polls.push(l1);
    let mut prev = l1;
    let (mut f_prev2, mut f_prev) = (0.0, fd.cdf(l1));
    for _ in 1..k {
        let next = prev + (f_prev - f_prev2) / fd.pdf(prev);
        if !next.is_finite() || next > u + eps {
            return Shot::Over;
        }
        polls.push(next);
        prev = next;
        f_prev2 = f_prev;
        f_prev = fd.cdf(next);
    }
    Shot::Done(polls)
}

/// Gap between `L_k` and `u` for a given `L_1`; `+inf` when the polls overrun.
fn miss(fd: &FlooredDensity<'_>, l1: f64, k: usize, u: f64, eps: f64) -> (f64, Option<Vec<f64>>) {
    match shoot(fd, l1, k, u, eps) {
        Shot::Over => (f64::INFINITY, None),
        Shot::Done(polls) => (polls[k - 1] - u, Some(polls)),
    }
}

/// Solves the recurrence for `k` polls with `L_k` within `eps` of `u`.
///
/// `L_k` is not monotone in `L_1` for multimodal or noisy densities, so each
/// stationary placement is bracketed on a scan of `L_1` over `(0, u)`,
/// refined by bisection, and the one with the lowest expected delay returned.
pub fn solve_recurrence(d: &Density, k: usize, u: f64, eps: f64) -> Result<PollSchedule, PlanError> {
    if k == 0 {
        return Err(PlanError::InvalidRequest("k must be positive".into()));
    }
    if !(u > 0.0 && u.is_finite()) || !(eps > 0.0) {
        return Err(PlanError::InvalidRequest(format!("need U > 0 and eps > 0, got U={u}, eps={eps}")));
    }
    let fd = FlooredDensity::new(d, u);
    if k == 1 {
        return finish(&fd, vec![u], u);
    }
    let accept = |polls: &[f64]| (polls[k - 1] - u).abs() <= eps && polls.windows(2).all(|w| w[1] > w[0]);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |polls: Vec<f64>| {
        if let Ok(q) = super::expected_detection(d, &polls) {
            if best.as_ref().is_none_or(|(b, _)| q < *b) {
                best = Some((q, polls));
            }
        }
    };
    let step = u / SCAN_POINTS as f64;
    let mut prev = (step * 1e-3, miss(&fd, step * 1e-3, k, u, eps).0);
    for i in 1..=SCAN_POINTS {
        let l1 = if i == SCAN_POINTS { u * (1.0 - 1e-12) } else { i as f64 * step };
        let (g, polls) = miss(&fd, l1, k, u, eps);
        if let Some(p) = polls.filter(|p| accept(p)) {
            consider(p);
        } else if (prev.1 < 0.0) != (g < 0.0) {
            // A sign change brackets a root; keep the negative end in `lo`.
            let (mut lo, mut hi) = if prev.1 < 0.0 { (prev.0, l1) } else { (l1, prev.0) };
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                if mid == lo || mid == hi {
                    break;
                }
                match miss(&fd, mid, k, u, eps) {
                    (_, Some(p)) if accept(&p) => {
                        consider(p);
                        break;
                    }
                    (g, _) if g < 0.0 => lo = mid,
                    _ => hi = mid,
                }
            }
        }
        prev = (l1, g);
    }
    match best {
        Some((_, polls)) => finish(&fd, polls, u),
        None => Err(PlanError::Infeasible { k, u }),
    }
}

fn finish(fd: &FlooredDensity<'_>, polls: Vec<f64>, u: f64) -> Result<PollSchedule, PlanError> {
    let check = second_order(fd, &polls);
    let mut s = schedule_for(fd.d, polls, u, None)?;
    s.valid_minimum = check.all_nonnegative;
    s.density_floored = fd.floored();
    Ok(s)
}

/// Diagonal second derivatives of the expected delay at a placement:
/// `2 p(L_i) - (L_{i+1} - L_i) p'(L_i)` for inner polls and
/// `2 p(L_k) + L_k p'(L_k)` for the last.
pub fn second_order_check(d: &Density, polls: &[f64], u: f64) -> SecondOrderCheck {
    second_order(&FlooredDensity::new(d, u), polls)
}

fn second_order(fd: &FlooredDensity<'_>, polls: &[f64]) -> SecondOrderCheck {
    let k = polls.len();
    let values: Vec<f64> = (0..k)
        .map(|i| {
            let l = polls[i];
            let p = fd.pdf(l);
            let dp = fd.d.pdf_slope(l);
            if i + 1 < k {
                2.0 * p - (polls[i + 1] - l) * dp
            } else {
                2.0 * p + l * dp
            }
        })
        .collect();
    let all_nonnegative = values.iter().all(|v| *v >= -1e-12);
    SecondOrderCheck { values, all_nonnegative }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{EmpiricalDistribution, FitConfig};
    use crate::pollplan::expected_detection;

    fn exact_uniform(hi: f64) -> EmpiricalDistribution {
        EmpiricalDistribution::from_bins(hi / 64.0, &[1.0; 64], 1000).unwrap()
    }

    #[test]
    fn uniform_gives_equal_spacing() {
        let u = exact_uniform(10.0);
        let s = solve_recurrence(u.density().unwrap(), 5, 10.0, 1e-5).unwrap();
        for (got, want) in s.polls.iter().zip([2.0, 4.0, 6.0, 8.0, 10.0]) {
            assert!((got - want).abs() < 1e-3, "{:?}", s.polls);
        }
        assert!((s.expected_detection.unwrap() - 1.0).abs() < 0.05);
        assert!(s.valid_minimum);
    }

    #[test]
    fn single_poll_sits_at_u() {
        let u = exact_uniform(10.0);
        let s = solve_recurrence(u.density().unwrap(), 1, 7.5, 1e-5).unwrap();
        assert_eq!(s.polls, vec![7.5]);
    }

    #[test]
    fn stationary_point_of_the_objective() {
        // Numerical gradient of the delay vanishes at the inner polls.
        let s: Vec<f64> = (0..2000).map(|i| 1.0 + 9.0 * ((i as f64 * 0.618_034) % 1.0).powi(2)).collect();
        let dist = EmpiricalDistribution::fit(&s, FitConfig::smoothed()).unwrap();
        let d = dist.density().unwrap();
        let u = d.ppf(0.99);
        let sched = solve_recurrence(d, 4, u, 1e-7).unwrap();
        let base = expected_detection(d, &sched.polls).unwrap();
        for i in 0..3 {
            let h = 1e-4;
            let mut plus = sched.polls.clone();
            plus[i] += h;
            let mut minus = sched.polls.clone();
            minus[i] -= h;
            let g = (expected_detection(d, &plus).unwrap() - expected_detection(d, &minus).unwrap()) / (2.0 * h);
            assert!(g.abs() < 1e-3 * base.max(1.0), "poll {i}: gradient {g}");
        }
    }

    #[test]
    fn zero_density_is_floored_not_fatal() {
        // Mass only in [6, 10]: low guesses of L_1 hit the empty region.
        let mut mass = vec![0.0; 64];
        mass[40..].iter_mut().for_each(|m| *m = 1.0);
        let dist = EmpiricalDistribution::from_bins(10.0 / 64.0, &mass, 100).unwrap();
        let s = solve_recurrence(dist.density().unwrap(), 3, 10.0, 1e-5).unwrap();
        assert!((s.polls[2] - 10.0).abs() <= 1e-5);
        assert!(s.polls[0] > 6.0);
        assert!(s.density_floored);
    }

    #[test]
    fn bimodal_density_gets_the_best_stationary_point() {
        // Two well separated modes give several stationary placements.
        let mut mass = vec![0.0; 64];
        mass[8..14].iter_mut().for_each(|m| *m = 1.0);
        mass[50..56].iter_mut().for_each(|m| *m = 1.0);
        let dist = EmpiricalDistribution::from_bins(0.5, &mass, 100).unwrap();
        let d = dist.density().unwrap();
        let u = 28.0;
        let s = solve_recurrence(d, 2, u, 1e-6).unwrap();
        let brute = (1..2800).map(|i| expected_detection(d, &[i as f64 * 0.01, u]).unwrap()).fold(f64::INFINITY, f64::min);
        assert!(s.expected_detection.unwrap() <= brute + 1e-3, "{:?} vs {brute}", s.expected_detection);
    }

    #[test]
    fn rejects_zero_k() {
        let u = exact_uniform(10.0);
        assert!(solve_recurrence(u.density().unwrap(), 0, 10.0, 1e-5).is_err());
    }
}
