//! Routines as DAGs of device actions connected by milestone edges.
//!
//! An edge `P -(kind)-> C` lets `C` start once `P` emits `kind`. Failure
//! edges name fallbacks: if a Failure child `F` of `P` and `P` itself both
//! lead into `C`, those two edges form an OR group, so `C` runs after either
//! the primary or its fallback. Every other set of incoming edges is an AND.

mod doc;
mod run;

pub use doc::{parse_routine, serialize_routine};
pub use run::{ActionStatus, RoutineRun, RunUpdate};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::lifecycle::EventKind;

#[derive(Debug, Error)]
pub enum RoutineError {
    #[error("routine document is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("routine has a dependency cycle through {0}")]
    Cycle(String),
    #[error("action {action}: depend_on lists {given} events for {expected} predecessors")]
    ArityMismatch { action: String, given: usize, expected: usize },
    #[error("action {action}: unknown event {event:?}")]
    UnknownEvent { action: String, event: String },
    #[error("action {action} depends on unknown action {missing}")]
    UnknownAction { action: String, missing: String },
    #[error("duplicate action id {0}")]
    DuplicateId(String),
    #[error("routine has no actions")]
    Empty,
    #[error("invalid routine: {0}")]
    Invalid(String),
}

/// Planned milestone offsets from the request, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub ack: f64,
    pub start: f64,
    pub complete: f64,
}

impl Estimate {
    pub fn new(ack: f64, start: f64, complete: f64) -> Result<Self, RoutineError> {
        let ok = [ack, start, complete].iter().all(|v| v.is_finite() && *v >= 0.0)
            && ack <= start
            && start <= complete
            && complete > 0.0;
        if !ok {
            return Err(RoutineError::Invalid(format!(
                "estimate offsets must satisfy 0 <= ack <= start <= complete, complete > 0; got {ack}, {start}, {complete}"
            )));
        }
        Ok(Estimate { ack, start, complete })
    }

    /// Fixed-length action that starts on request.
    pub fn fixed(len: f64) -> Self {
        Estimate { ack: 0.0, start: 0.0, complete: len }
    }

    pub fn len(&self) -> f64 {
        self.complete
    }

    /// Offset at which a child on `kind` may start. Failure edges reserve the
    /// fallback slot as if the parent ran to completion.
    pub fn offset(&self, kind: EventKind) -> f64 {
        match kind {
            EventKind::Ack => self.ack,
            EventKind::Start => self.start,
            EventKind::Complete | EventKind::Failure => self.complete,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub id: String,
    pub device: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub params: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<Estimate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub parent: usize,
    pub child: usize,
    pub on: EventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutineDag {
    pub id: String,
    pub alias: Option<String>,
    actions: Vec<ActionSpec>,
    edges: Vec<Edge>,
    /// Incoming edge indices per action, in document order.
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
    /// Per action, incoming edges partitioned into groups; a group is
    /// satisfied by any one member and every group must be satisfied.
    groups: Vec<Vec<Vec<usize>>>,
    topo: Vec<usize>,
}

impl RoutineDag {
    /// Validates and builds a DAG. Edges refer to action indices.
    pub fn new(id: &str, alias: Option<String>, actions: Vec<ActionSpec>, edges: Vec<Edge>) -> Result<Self, RoutineError> {
        if actions.is_empty() {
            return Err(RoutineError::Empty);
        }
        let n = actions.len();
        let mut edges = edges;
        edges.sort_by_key(|e| (e.child, e.parent, e.on));
        edges.dedup();
        let mut seen = std::collections::BTreeSet::new();
        for a in &actions {
            if a.id.is_empty() || a.device.is_empty() {
                return Err(RoutineError::Invalid("actions need non-empty id and device".into()));
            }
            if !seen.insert(a.id.as_str()) {
                return Err(RoutineError::DuplicateId(a.id.clone()));
            }
        }
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            if e.parent >= n || e.child >= n {
                return Err(RoutineError::Invalid(format!("edge {i} refers past the action list")));
            }
            if e.parent == e.child {
                return Err(RoutineError::Cycle(actions[e.parent].id.clone()));
            }
            incoming[e.child].push(i);
            outgoing[e.parent].push(i);
        }
        let topo = bfs_topo(n, &edges, &incoming, &outgoing).ok_or_else(|| {
            let stuck = (0..n).find(|&i| !incoming[i].is_empty()).unwrap_or(0);
            RoutineError::Cycle(actions[stuck].id.clone())
        })?;
        let groups = (0..n).map(|c| or_groups(c, &edges, &incoming)).collect();
        Ok(RoutineDag { id: id.to_string(), alias, actions, edges, incoming, outgoing, groups, topo })
    }

    pub fn actions(&self) -> &[ActionSpec] {
        &self.actions
    }

    pub fn action(&self, i: usize) -> &ActionSpec {
        &self.actions[i]
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn index_of(&self, action_id: &str) -> Option<usize> {
        self.actions.iter().position(|a| a.id == action_id)
    }

    pub fn parents(&self, i: usize) -> impl Iterator<Item = &Edge> {
        self.incoming[i].iter().map(move |&e| &self.edges[e])
    }

    pub fn children(&self, i: usize) -> impl Iterator<Item = &Edge> {
        self.outgoing[i].iter().map(move |&e| &self.edges[e])
    }

    pub(crate) fn groups(&self, i: usize) -> &[Vec<usize>] {
        &self.groups[i]
    }

    pub(crate) fn edge(&self, e: usize) -> &Edge {
        &self.edges[e]
    }

    /// Topological order: breadth-first from the roots, ties in listing order.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn roots(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.incoming[i].is_empty()).collect()
    }

    /// True when `i` runs only if some parent fails.
    pub fn is_fallback(&self, i: usize) -> bool {
        self.parents(i).any(|e| e.on == EventKind::Failure)
    }

    /// All actions reachable from `i`, excluding `i`.
    pub fn descendants(&self, i: usize) -> Vec<usize> {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![i];
        let mut out = Vec::new();
        while let Some(x) = stack.pop() {
            for e in self.children(x) {
                if !seen[e.child] {
                    seen[e.child] = true;
                    out.push(e.child);
                    stack.push(e.child);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Devices touched by this routine, sorted and deduplicated.
    pub fn devices(&self) -> Vec<&str> {
        let mut d: Vec<&str> = self.actions.iter().map(|a| a.device.as_str()).collect();
        d.sort_unstable();
        d.dedup();
        d
    }
}

fn bfs_topo(n: usize, edges: &[Edge], incoming: &[Vec<usize>], outgoing: &[Vec<usize>]) -> Option<Vec<usize>> {
    let mut indeg: Vec<usize> = incoming.iter().map(Vec::len).collect();
    let mut queue: std::collections::VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(x) = queue.pop_front() {
        order.push(x);
        let mut freed: Vec<usize> = Vec::new();
        for &e in &outgoing[x] {
            let c = edges[e].child;
            indeg[c] -= 1;
            if indeg[c] == 0 {
                freed.push(c);
            }
        }
        freed.sort_unstable();
        queue.extend(freed);
    }
    (order.len() == n).then_some(order)
}

/// Partitions the incoming edges of `child` into OR groups.
fn or_groups(child: usize, edges: &[Edge], incoming: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let inc = &incoming[child];
    let mut group_of: Vec<usize> = (0..inc.len()).collect();
    fn find(g: &mut [usize], x: usize) -> usize {
        if g[x] != x {
            let r = find(g, g[x]);
            g[x] = r;
        }
        g[x]
    }
    for (a, &ea) in inc.iter().enumerate() {
        let f = edges[ea].parent;
        for &pe in &incoming[f] {
            if edges[pe].on != EventKind::Failure {
                continue;
            }
            let p = edges[pe].parent;
            if let Some(b) = inc.iter().position(|&eb| edges[eb].parent == p) {
                let (ra, rb) = (find(&mut group_of, a), find(&mut group_of, b));
                group_of[ra] = rb;
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for a in 0..inc.len() {
        let r = find(&mut group_of, a);
        groups.entry(r).or_default().push(inc[a]);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort();
    out
}
