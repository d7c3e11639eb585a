//! Event log of one simulation run, as JSON lines `{t, type, payload}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: f64,
    #[serde(rename = "type")]
    pub kind: String,
    pub payload: Value,
}

impl TraceEvent {
    pub fn routine(&self) -> Option<usize> {
        self.payload.get("routine").and_then(Value::as_u64).map(|v| v as usize)
    }

    pub fn action(&self) -> Option<&str> {
        self.payload.get("action").and_then(Value::as_str)
    }

    pub fn device(&self) -> Option<&str> {
        self.payload.get("device").and_then(Value::as_str)
    }

    /// `(routine, action)` for action-level events.
    pub fn action_key(&self) -> Option<(usize, String)> {
        Some((self.routine()?, self.action()?.to_string()))
    }
}

/// Events in processing order; timestamps never decrease.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub events: Vec<TraceEvent>,
}

impl SimTrace {
    pub fn push(&mut self, t: f64, kind: &str, payload: Value) {
        debug_assert!(self.events.last().is_none_or(|e| e.t <= t), "trace out of order");
        self.events.push(TraceEvent { t, kind: kind.to_string(), payload });
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceEvent> + 'a {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace events serialise"));
            out.push('\n');
        }
        out
    }

    pub fn from_json_lines(s: &str) -> Result<Self, serde_json::Error> {
        let events = s.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(SimTrace { events })
    }

    /// Hex SHA-256 of the JSON-lines form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json_lines().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hub-side occupancy intervals `[request, terminal]` per device.
    pub fn busy_intervals(&self) -> BTreeMap<String, Vec<(f64, f64)>> {
        let mut open: BTreeMap<(usize, String), (String, f64)> = BTreeMap::new();
        let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for e in &self.events {
            match e.kind.as_str() {
                "request" => {
                    if let (Some(k), Some(d)) = (e.action_key(), e.device()) {
                        open.insert(k, (d.to_string(), e.t));
                    }
                }
                "complete" | "failure" => {
                    if let Some((d, t0)) = e.action_key().and_then(|k| open.remove(&k)) {
                        out.entry(d).or_default().push((t0, e.t));
                    }
                }
                _ => {}
            }
        }
        for (d, t0) in open.into_values() {
            let end = self.events.last().map_or(t0, |e| e.t);
            out.entry(d).or_default().push((t0, end));
        }
        for v in out.values_mut() {
            v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        }
        out
    }

    /// Pairs of hub-side occupancy intervals on the same device that overlap.
    pub fn device_overlaps(&self) -> usize {
        self.busy_intervals()
            .values()
            .map(|v| v.windows(2).filter(|w| w[1].0 < w[0].1 - 1e-9).count())
            .sum()
    }
}
