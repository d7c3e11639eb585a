//! Per-cell run reports, the aggregate table and report comparison.

use serde::{Deserialize, Serialize};

use super::{CliError, PolicySpec};
use crate::sim::{MetricsReport, SimOutput, Stat};

/// Bumped whenever the report layout changes; `compare` refuses mixed versions.
pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecksSummary {
    pub safety_violations: usize,
    pub serial_equivalent: bool,
    pub unfinished: usize,
    pub hub_conflicts: usize,
    pub events: usize,
}

/// One (policy, seed) cell. Contains nothing that depends on wall-clock time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub schema: u32,
    pub name: String,
    pub policy: PolicySpec,
    pub seed: u64,
    pub trace_hash: String,
    pub checks: ChecksSummary,
    pub metrics: MetricsReport,
}

impl CellReport {
    pub fn new(name: &str, policy: PolicySpec, seed: u64, out: &SimOutput) -> Self {
        let c = &out.checks;
        CellReport {
            schema: REPORT_SCHEMA,
            name: name.to_string(),
            policy,
            seed,
            trace_hash: out.trace.hash(),
            checks: ChecksSummary {
                safety_violations: c.safety_violations,
                serial_equivalent: c.serial_violation.is_none(),
                unfinished: c.unfinished,
                hub_conflicts: c.hub_conflicts,
                events: c.events,
            },
            metrics: out.metrics.clone(),
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

/// One row per policy and metric: statistics of the per-seed values. A metric
/// no seed produced is `n/a` with `n = 0`.
pub fn aggregate_csv(reports: &[CellReport]) -> String {
    let mut policies: Vec<PolicySpec> = Vec::new();
    for r in reports {
        if !policies.contains(&r.policy) {
            policies.push(r.policy);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["policy", "metric", "n", "mean", "q50", "q95"]).expect("in-memory write");
    for p in policies {
        let cells: Vec<Vec<(String, Option<f64>)>> = reports.iter().filter(|r| r.policy == p).map(|r| r.metrics.scalars()).collect();
        let Some(first) = cells.first() else { continue };
        for (i, (metric, _)) in first.iter().enumerate() {
            let values: Vec<f64> = cells.iter().filter_map(|c| c.get(i).and_then(|(_, v)| *v)).collect();
            let s = (!values.is_empty()).then(|| Stat::of(&values));
            w.write_record([
                p.label(),
                metric.clone(),
                values.len().to_string(),
                cell(s.map(|s| s.mean)),
                cell(s.map(|s| s.q50)),
                cell(s.map(|s| s.q95)),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Percent change of `v` relative to `base`; `None` when undefined.
pub fn delta_percent(base: f64, v: f64) -> Option<f64> {
    if base == v {
        Some(0.0)
    } else if base == 0.0 {
        None
    } else {
        Some((v - base) / base.abs() * 100.0)
    }
}

/// Text table of every scalar metric, deltas relative to the first report.
pub fn compare_table(reports: &[(String, CellReport)]) -> Result<String, CliError> {
    let Some((_, base)) = reports.first() else {
        return Err(CliError::Validation("compare needs at least two reports".into()));
    };
    if reports.len() < 2 {
        return Err(CliError::Validation("compare needs at least two reports".into()));
    }
    let scalars: Vec<Vec<(String, Option<f64>)>> = reports.iter().map(|(_, r)| r.metrics.scalars()).collect();
    let names: Vec<&String> = scalars[0].iter().map(|(n, _)| n).collect();
    for ((label, r), s) in reports.iter().zip(&scalars) {
        if r.schema != base.schema || s.iter().map(|(n, _)| n).ne(names.iter().copied()) {
            return Err(CliError::Validation(format!("{label}: report schema differs from the first report")));
        }
    }
    let width = reports.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(24);
    let mut out = format!("{:<26}", "metric");
    for (label, _) in reports {
        out.push_str(&format!(" {label:>width$}"));
    }
    for (i, name) in names.iter().enumerate() {
        out.push_str(&format!("\n{name:<26}"));
        let b = scalars[0][i].1;
        for (j, s) in scalars.iter().enumerate() {
            let v = s[i].1;
            let text = match (j, b, v) {
                (_, _, None) => "n/a".to_string(),
                (0, _, Some(v)) => format!("{v:.4}"),
                (_, None, Some(v)) => format!("{v:.4} (n/a)"),
                (_, Some(b), Some(v)) => match delta_percent(b, v) {
                    Some(d) => format!("{v:.4} ({d:+.1}%)"),
                    None => format!("{v:.4} (n/a)"),
                },
            };
            out.push_str(&format!(" {text:>width$}"));
        }
    }
    Ok(out)
}
