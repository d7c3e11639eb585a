//! Browser demo: poll placement, policy comparison and online learning.
//!
//! Each export takes a JSON request and returns a JSON response, so the page
//! needs no bindings beyond strings. The `*_json` functions hold the logic and
//! run natively in tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Uniform};
use rasc::dist::{wasserstein, ConvergenceMonitor, EmpiricalDistribution, FitConfig};
use rasc::pollplan::{expected_detection, find_polls, periodic_plan, vopt_plan, PollPlanRequest, PollSchedule};
use rasc::sim::{office_devices, random_routines, run, ArrivalProcess, PolicyConfig, PollingPolicy, RoutineGen, SchedulingPolicy, WorkloadSpec};
use serde::Deserialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Normal,
    Uniform,
    Exponential,
    Bimodal,
}

/// Synthetic duration source: `mean` and `spread` are in seconds.
#[derive(Debug, Clone, Copy, Deserialize)]
pub struct Source {
    pub shape: Shape,
    pub mean: f64,
    pub spread: f64,
}

impl Source {
    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, String> {
        let (m, s) = (self.mean, self.spread.abs());
        if !(m.is_finite() && s.is_finite() && m > 0.0) {
            return Err(format!("mean must be positive, got {m}"));
        }
        let normal = |mu: f64| Normal::new(mu, s.max(1e-6)).map_err(|e| e.to_string());
        let v: Vec<f64> = match self.shape {
            Shape::Normal => normal(m)?.sample_iter(&mut *rng).take(n).collect(),
            Shape::Uniform => Uniform::new_inclusive((m - s).max(0.0), m + s).map_err(|e| e.to_string())?.sample_iter(&mut *rng).take(n).collect(),
            Shape::Exponential => Exp::new(1.0 / m).map_err(|e| e.to_string())?.sample_iter(&mut *rng).take(n).collect(),
            Shape::Bimodal => {
                let (lo, hi) = (normal(m * 0.6)?, normal(m * 1.4)?);
                (0..n).map(|i| if i % 2 == 0 { lo.sample(rng) } else { hi.sample(rng) }).collect()
            }
        };
        Ok(v.into_iter().map(|x| x.max(0.0)).collect())
    }
}

#[derive(Debug, Deserialize)]
pub struct PlanRequest {
    pub source: Source,
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub q_w: f64,
    #[serde(default = "default_slo")]
    pub slo: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_samples() -> usize {
    500
}

fn default_slo() -> f64 {
    0.9
}

fn plan_view(d: &rasc::dist::Density, p: &PollSchedule, q_w: f64) -> Value {
    json!({
        "polls": p.polls,
        "expected_detection": expected_detection(d, &p.polls).ok(),
        "coverage": rasc::pollplan::coverage(d, &p.polls, q_w).ok(),
    })
}

/// Fits the synthetic samples and places polls three ways.
pub fn plan_polls_json(request: &str) -> Result<Value, String> {
    let req: PlanRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    if !(req.q_w > 0.0) || !(req.slo > 0.0 && req.slo <= 1.0) || req.samples < 2 {
        return Err("need q_w > 0, slo in (0, 1] and at least 2 samples".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let samples = req.source.draw(req.samples, &mut rng)?;
    let dist = EmpiricalDistribution::fit(&samples, FitConfig::smoothed()).map_err(|e| e.to_string())?;
    let d = dist.density().map_err(|e| e.to_string())?;
    let u = d.ppf(0.99).max(1e-3);
    let adaptive = find_polls(&PollPlanRequest::new(d, u, req.q_w, req.slo)).map_err(|e| e.to_string())?;
    let periodic = periodic_plan(u, req.q_w).map_err(|e| e.to_string())?;
    let vopt = vopt_plan(d, adaptive.k(), u).map_err(|e| e.to_string())?;
    let curve: Vec<[f64; 2]> = (0..=200).map(|i| d.support_end() * i as f64 / 200.0).map(|t| [t, d.pdf(t)]).collect();
    Ok(json!({
        "u": u,
        "mean": d.mean(),
        "density": curve,
        "adaptive": plan_view(d, &adaptive, req.q_w),
        "periodic": plan_view(d, &periodic, req.q_w),
        "vopt": plan_view(d, &vopt, req.q_w),
    }))
}

#[derive(Debug, Deserialize)]
pub struct ScheduleRequest {
    pub routines: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub perturbation: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_horizon() -> f64 {
    600.0
}

/// Runs one generated office workload under every scheduling policy.
pub fn schedule_demo_json(request: &str) -> Result<Value, String> {
    let req: ScheduleRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    // Keeps a single call responsive in the page.
    if req.routines == 0 || req.routines > 200 || !(req.horizon > 0.0) || !(0.0..=1.0).contains(&req.perturbation) {
        return Err("need 1..=200 routines, horizon > 0 and perturbation in [0, 1]".into());
    }
    let devices = office_devices();
    let routines = random_routines(req.routines, &devices, &RoutineGen::default(), req.seed);
    let wl = WorkloadSpec { routines, arrival_process: ArrivalProcess::bursty(), horizon: req.horizon, seed: req.seed }.build();
    let mut rows = Vec::new();
    for p in SchedulingPolicy::ALL {
        let cfg = PolicyConfig { perturbation: req.perturbation, ..PolicyConfig::with(PollingPolicy::Adaptive, p) };
        let out = run(&wl, &devices, &cfg, req.seed).map_err(|e| e.to_string())?;
        let m = &out.metrics;
        rows.push(json!({
            "policy": p.label(),
            "latency": m.latency.mean,
            "wait": m.wait_time.mean,
            "parallelism": m.parallelism.mean,
            "reschedules": m.reschedules,
            "safe": out.checks.safety_violations == 0 && out.checks.serial_violation.is_none(),
            "busy": out.trace.busy_intervals(),
        }));
    }
    Ok(json!({ "policies": rows }))
}

#[derive(Debug, Deserialize)]
pub struct ConvergenceRequest {
    pub source: Source,
    pub samples: usize,
    /// Sample index after which durations grow by `shift_by` seconds.
    #[serde(default)]
    pub shift_at: Option<usize>,
    #[serde(default)]
    pub shift_by: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_window() -> usize {
    20
}

/// Streams samples into an online learner and reports, per sample, whether
/// the model is stable, whether drift fired, and its distance to the truth.
pub fn convergence_demo_json(request: &str) -> Result<Value, String> {
    let req: ConvergenceRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    if req.samples == 0 || req.samples > 2000 {
        return Err("need 1..=2000 samples".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let shift_at = req.shift_at.unwrap_or(usize::MAX);
    let xs: Vec<f64> = req.source.draw(req.samples, &mut rng)?.into_iter().enumerate().map(|(i, x)| if i >= shift_at { x + req.shift_by } else { x }).collect();
    let truth = |shifted: bool| -> Result<EmpiricalDistribution, String> {
        let mut r = ChaCha8Rng::seed_from_u64(req.seed ^ 0x5eed);
        let base = req.source.draw(5000, &mut r)?;
        let off = if shifted { req.shift_by } else { 0.0 };
        EmpiricalDistribution::fit(&base.iter().map(|x| x + off).collect::<Vec<_>>(), FitConfig::default()).map_err(|e| e.to_string())
    };
    let (before, after) = (truth(false)?, truth(true)?);
    let mut monitor = ConvergenceMonitor::new(FitConfig::drift_aware(), req.window);
    let mut points = Vec::with_capacity(xs.len());
    for (i, &x) in xs.iter().enumerate() {
        let drift = monitor.push(x).map_err(|e| e.to_string())?;
        let distance = if i >= 1 {
            let model = monitor.model().map_err(|e| e.to_string())?;
            wasserstein(&model, if i >= shift_at { &after } else { &before }).ok()
        } else {
            None
        };
        points.push(json!({ "i": i + 1, "x": x, "stable": monitor.is_stable(), "drift": drift, "distance": distance }));
    }
    Ok(json!({ "stable_at": monitor.tracker().stable_at(), "points": points }))
}

fn exported(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn plan_polls(request: &str) -> Result<String, JsError> {
    exported(plan_polls_json(request))
}

#[wasm_bindgen]
pub fn schedule_demo(request: &str) -> Result<String, JsError> {
    exported(schedule_demo_json(request))
}

#[wasm_bindgen]
pub fn convergence_demo(request: &str) -> Result<String, JsError> {
    exported(convergence_demo_json(request))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_needs_fewer_polls_than_periodic() {
        let v = plan_polls_json(r#"{"source":{"shape":"normal","mean":30,"spread":3},"q_w":2,"seed":1}"#).unwrap();
        let n = |k: &str| v[k]["polls"].as_array().unwrap().len();
        assert!(n("adaptive") < n("periodic"));
        assert_eq!(n("adaptive"), n("vopt"));
        assert!(v["adaptive"]["coverage"].as_f64().unwrap() >= 0.9 - 1e-9);
    }

    #[test]
    fn every_policy_runs_safely() {
        let v = schedule_demo_json(r#"{"routines":15,"horizon":300,"perturbation":0.2,"seed":4}"#).unwrap();
        let rows = v["policies"].as_array().unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r["safe"] == json!(true)));
    }

    #[test]
    fn learner_stabilises_and_sees_the_shift() {
        let req = r#"{"source":{"shape":"normal","mean":10,"spread":1},"samples":300,"shift_at":150,"shift_by":10,"seed":2}"#;
        let v = convergence_demo_json(req).unwrap();
        assert!(v["stable_at"].as_u64().is_some());
        let pts = v["points"].as_array().unwrap();
        assert!(pts[150..].iter().any(|p| p["drift"] == json!(true)));
        assert!(pts.last().unwrap()["distance"].as_f64().unwrap() < 2.0);
    }

    #[test]
    fn bad_requests_are_errors() {
        assert!(plan_polls_json("{}").is_err());
        assert!(plan_polls_json(r#"{"source":{"shape":"normal","mean":-1,"spread":1},"q_w":1}"#).is_err());
        assert!(schedule_demo_json(r#"{"routines":0}"#).is_err());
        assert!(convergence_demo_json(r#"{"source":{"shape":"uniform","mean":5,"spread":1},"samples":0}"#).is_err());
    }
}
