//! Routine document format.
//!
//! ```json
//! {"id": "leave", "alias": "leave home", "actions": [
//!   {"id": "a1", "device": "door", "action": "close"},
//!   {"parallel": [{"id": "a2", "device": "light", "action": "off"},
//!                 {"id": "a3", "device": "shade", "action": "down"}],
//!    "depend_on": "complete"},
//!   {"id": "a4", "device": "lock", "action": "lock",
//!    "after": [{"action_id": "a1", "on": "start"}]}
//! ]}
//! ```
//!
//! `after` names parents explicitly. `depend_on` is positional: it links an
//! entry to every member of the entry before it, either with one event for
//! all or one event per member. Serialisation always emits the explicit form.

use serde::{Deserialize, Serialize};

use super::{ActionSpec, Edge, Estimate, EventKind, RoutineDag, RoutineError};

#[derive(Deserialize)]
struct RawDoc {
    id: String,
    #[serde(default)]
    alias: Option<String>,
    actions: Vec<RawEntry>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawEntry {
    Parallel {
        parallel: Vec<RawAction>,
        #[serde(default)]
        depend_on: Option<DependOn>,
    },
    Action(Box<RawAction>),
}

#[derive(Deserialize)]
struct RawAction {
    id: String,
    device: String,
    action: String,
    #[serde(default)]
    params: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    estimate: Option<Estimate>,
    #[serde(default)]
    after: Vec<RawAfter>,
    #[serde(default)]
    depend_on: Option<DependOn>,
}

#[derive(Clone, Deserialize)]
#[serde(untagged)]
enum DependOn {
    One(String),
    Many(Vec<String>),
}

#[derive(Deserialize, Serialize)]
struct RawAfter {
    action_id: String,
    #[serde(default = "default_on")]
    on: String,
}

fn default_on() -> String {
    "complete".into()
}

#[derive(Serialize)]
struct OutDoc<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    alias: Option<&'a str>,
    actions: Vec<OutAction<'a>>,
}

#[derive(Serialize)]
struct OutAction<'a> {
    #[serde(flatten)]
    spec: &'a ActionSpec,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    after: Vec<RawAfter>,
}

fn parse_event(action: &str, s: &str) -> Result<EventKind, RoutineError> {
    match s.to_ascii_lowercase().as_str() {
        "ack" => Ok(EventKind::Ack),
        "start" => Ok(EventKind::Start),
        "complete" => Ok(EventKind::Complete),
        "failure" | "fail" => Ok(EventKind::Failure),
        _ => Err(RoutineError::UnknownEvent { action: action.to_string(), event: s.to_string() }),
    }
}

pub fn parse_routine(json: &str) -> Result<RoutineDag, RoutineError> {
    let doc: RawDoc = serde_json::from_str(json)?;
    let mut specs = Vec::new();
    // Per spec: explicit parents, positional link, and the previous entry's members.
    let mut pending: Vec<(usize, Vec<RawAfter>, Option<DependOn>, Vec<usize>)> = Vec::new();
    let mut prev_members: Vec<usize> = Vec::new();
    for entry in doc.actions {
        let (members, group_dep) = match entry {
            RawEntry::Parallel { parallel, depend_on } => (parallel, depend_on),
            RawEntry::Action(a) => (vec![*a], None),
        };
        if members.is_empty() {
            return Err(RoutineError::Invalid("empty parallel block".into()));
        }
        let mut this_members = Vec::new();
        for mut a in members {
            let idx = specs.len();
            let dep = a.depend_on.take().or_else(|| group_dep.clone());
            pending.push((idx, std::mem::take(&mut a.after), dep, prev_members.clone()));
            specs.push(ActionSpec {
                id: a.id,
                device: a.device,
                action: a.action,
                params: a.params,
                estimate: a.estimate,
            });
            this_members.push(idx);
        }
        prev_members = this_members;
    }
    let mut edges = Vec::new();
    for (idx, after, dep, prev) in pending {
        let name = specs[idx].id.clone();
        for af in after {
            let parent = specs
                .iter()
                .position(|s| s.id == af.action_id)
                .ok_or_else(|| RoutineError::UnknownAction { action: name.clone(), missing: af.action_id.clone() })?;
            edges.push(Edge { parent, child: idx, on: parse_event(&name, &af.on)? });
        }
        match dep {
            None => {}
            Some(DependOn::One(s)) => {
                if prev.is_empty() {
                    return Err(RoutineError::ArityMismatch { action: name, given: 1, expected: 0 });
                }
                let on = parse_event(&name, &s)?;
                edges.extend(prev.iter().map(|&p| Edge { parent: p, child: idx, on }));
            }
            Some(DependOn::Many(v)) => {
                if v.len() != prev.len() {
                    return Err(RoutineError::ArityMismatch { action: name, given: v.len(), expected: prev.len() });
                }
                for (&p, s) in prev.iter().zip(&v) {
                    edges.push(Edge { parent: p, child: idx, on: parse_event(&name, s)? });
                }
            }
        }
    }
    RoutineDag::new(&doc.id, doc.alias, specs, edges)
}

/// Canonical document with explicit `after` lists.
pub fn serialize_routine(dag: &RoutineDag) -> String {
    let actions = (0..dag.len())
        .map(|i| OutAction {
            spec: dag.action(i),
            after: dag
                .parents(i)
                .map(|e| RawAfter { action_id: dag.action(e.parent).id.clone(), on: e.on.to_string() })
                .collect(),
        })
        .collect();
    let doc = OutDoc { id: &dag.id, alias: dag.alias.as_deref(), actions };
    serde_json::to_string(&doc).expect("routine documents always serialise")
}
