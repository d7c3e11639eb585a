//! Execution state of one routine instance.

use serde::{Deserialize, Serialize};

use super::{EventKind, RoutineDag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionStatus {
    Pending,
    Ready,
    Dispatched,
    Completed,
    Failed,
    /// Can never run: a required parent outcome is now impossible.
    Dead,
}

impl ActionStatus {
    pub fn is_final(self) -> bool {
        matches!(self, ActionStatus::Completed | ActionStatus::Failed | ActionStatus::Dead)
    }
}

/// Actions whose status changed as a consequence of an event.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunUpdate {
    pub ready: Vec<usize>,
    pub dead: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EdgeState {
    Satisfied,
    Pending,
    Impossible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutineRun {
    status: Vec<ActionStatus>,
    /// Event times per action, indexed ack, start, complete, failure.
    fired: Vec<[Option<f64>; 4]>,
    ready_at: Vec<Option<f64>>,
}

fn slot(kind: EventKind) -> usize {
    match kind {
        EventKind::Ack => 0,
        EventKind::Start => 1,
        EventKind::Complete => 2,
        EventKind::Failure => 3,
    }
}

impl RoutineRun {
    /// Fresh run; the roots are ready at `now`.
    pub fn start(dag: &RoutineDag, now: f64) -> (Self, RunUpdate) {
        let n = dag.len();
        let mut run = RoutineRun { status: vec![ActionStatus::Pending; n], fired: vec![[None; 4]; n], ready_at: vec![None; n] };
        let mut upd = RunUpdate::default();
        for i in dag.roots() {
            run.status[i] = ActionStatus::Ready;
            run.ready_at[i] = Some(now);
            upd.ready.push(i);
        }
        (run, upd)
    }

    pub fn status(&self, i: usize) -> ActionStatus {
        self.status[i]
    }

    pub fn fired_at(&self, i: usize, kind: EventKind) -> Option<f64> {
        self.fired[i][slot(kind)]
    }

    pub fn ready_at(&self, i: usize) -> Option<f64> {
        self.ready_at[i]
    }

    pub fn is_finished(&self) -> bool {
        self.status.iter().all(|s| s.is_final())
    }

    pub fn mark_dispatched(&mut self, i: usize) {
        if self.status[i] == ActionStatus::Ready {
            self.status[i] = ActionStatus::Dispatched;
        }
    }

    /// Marks a pending or ready action dead, e.g. when the caller gives up on it.
    pub fn cancel(&mut self, dag: &RoutineDag, i: usize, now: f64) -> RunUpdate {
        let mut upd = RunUpdate::default();
        if matches!(self.status[i], ActionStatus::Pending | ActionStatus::Ready) {
            self.status[i] = ActionStatus::Dead;
            upd.dead.push(i);
            self.propagate(dag, i, now, &mut upd);
        }
        upd
    }

    fn edge_state(&self, dag: &RoutineDag, e: usize) -> EdgeState {
        let edge = dag.edge(e);
        let p = edge.parent;
        let st = self.status[p];
        if edge.on == EventKind::Failure {
            return match st {
                ActionStatus::Failed => EdgeState::Satisfied,
                ActionStatus::Completed | ActionStatus::Dead => EdgeState::Impossible,
                _ => EdgeState::Pending,
            };
        }
        if self.fired[p][slot(edge.on)].is_some() {
            EdgeState::Satisfied
        } else if st.is_final() {
            EdgeState::Impossible
        } else {
            EdgeState::Pending
        }
    }

    fn action_state(&self, dag: &RoutineDag, i: usize) -> EdgeState {
        let mut all_ok = true;
        for group in dag.groups(i) {
            let states: Vec<EdgeState> = group.iter().map(|&e| self.edge_state(dag, e)).collect();
            if states.contains(&EdgeState::Satisfied) {
                continue;
            }
            if states.iter().all(|s| *s == EdgeState::Impossible) {
                return EdgeState::Impossible;
            }
            all_ok = false;
        }
        if all_ok {
            EdgeState::Satisfied
        } else {
            EdgeState::Pending
        }
    }

    /// Records a milestone of action `i` and returns what it unblocked.
    pub fn on_event(&mut self, dag: &RoutineDag, i: usize, kind: EventKind, t: f64) -> RunUpdate {
        let mut upd = RunUpdate::default();
        if self.fired[i][slot(kind)].is_some() || self.status[i].is_final() {
            return upd;
        }
        self.fired[i][slot(kind)] = Some(t);
        match kind {
            EventKind::Complete => self.status[i] = ActionStatus::Completed,
            EventKind::Failure => self.status[i] = ActionStatus::Failed,
            _ => {
                if matches!(self.status[i], ActionStatus::Pending | ActionStatus::Ready) {
                    self.status[i] = ActionStatus::Dispatched;
                }
            }
        }
        self.propagate(dag, i, t, &mut upd);
        upd
    }

    fn propagate(&mut self, dag: &RoutineDag, from: usize, t: f64, upd: &mut RunUpdate) {
        let mut stack = vec![from];
        while let Some(x) = stack.pop() {
            let children: Vec<usize> = dag.children(x).map(|e| e.child).collect();
            for c in children {
                if self.status[c] != ActionStatus::Pending {
                    continue;
                }
                match self.action_state(dag, c) {
                    EdgeState::Satisfied => {
                        self.status[c] = ActionStatus::Ready;
                        self.ready_at[c] = Some(t);
                        upd.ready.push(c);
                    }
                    EdgeState::Impossible => {
                        self.status[c] = ActionStatus::Dead;
                        upd.dead.push(c);
                        stack.push(c);
                    }
                    EdgeState::Pending => {}
                }
            }
        }
        upd.ready.sort_unstable();
        upd.ready.dedup();
        upd.dead.sort_unstable();
        upd.dead.dedup();
    }
}
