//! Admission rules of the comparison schedulers.
//!
//! None of them plan ahead. The simulator dispatches ready actions on idle
//! devices in arrival order and asks [`Admission`] whether a routine may use
//! a device yet.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::routine::RoutineDag;
use crate::sim::{PolicyConfig, SchedulingPolicy, SimError, SimOutput, VirtualDevice, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePolicy {
    /// One routine at a time, in arrival order.
    Fcfs,
    /// A routine starts once every earlier routine is done with the devices they share.
    FcfsPost,
    /// Routines are ordered by first contact; a device is used only after
    /// every routine ordered earlier is done with it.
    Jit,
}

impl BaselinePolicy {
    pub const ALL: [BaselinePolicy; 3] = [BaselinePolicy::Fcfs, BaselinePolicy::FcfsPost, BaselinePolicy::Jit];

    pub fn scheduling(self) -> SchedulingPolicy {
        match self {
            BaselinePolicy::Fcfs => SchedulingPolicy::Fcfs,
            BaselinePolicy::FcfsPost => SchedulingPolicy::FcfsPost,
            BaselinePolicy::Jit => SchedulingPolicy::Jit,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Admission {
    policy: BaselinePolicy,
    /// Routine ids in arrival order.
    arrived: Vec<usize>,
    rank: BTreeMap<usize, usize>,
    /// Actions per device that are neither done, failed nor dead.
    remaining: BTreeMap<usize, BTreeMap<String, usize>>,
    started: BTreeSet<usize>,
    contact: Vec<usize>,
}

impl Admission {
    pub fn new(policy: BaselinePolicy) -> Self {
        Admission { policy, arrived: Vec::new(), rank: BTreeMap::new(), remaining: BTreeMap::new(), started: BTreeSet::new(), contact: Vec::new() }
    }

    /// Routines must be added in arrival order.
    pub fn add_routine(&mut self, id: usize, dag: &RoutineDag) {
        let mut per = BTreeMap::new();
        for a in dag.actions() {
            *per.entry(a.device.clone()).or_insert(0) += 1;
        }
        self.rank.insert(id, self.arrived.len());
        self.arrived.push(id);
        self.remaining.insert(id, per);
    }

    fn left(&self, id: usize, device: &str) -> usize {
        self.remaining.get(&id).and_then(|m| m.get(device)).copied().unwrap_or(0)
    }

    pub fn is_finished(&self, id: usize) -> bool {
        self.remaining.get(&id).is_none_or(|m| m.values().all(|&n| n == 0))
    }

    pub fn may_start(&self, id: usize, device: &str) -> bool {
        let Some(&rank) = self.rank.get(&id) else { return false };
        let earlier = &self.arrived[..rank];
        match self.policy {
            BaselinePolicy::Fcfs => earlier.iter().all(|&q| self.is_finished(q)),
            BaselinePolicy::FcfsPost => {
                self.started.contains(&id) || {
                    let mine = &self.remaining[&id];
                    earlier.iter().all(|&q| mine.keys().all(|d| self.left(q, d) == 0))
                }
            }
            BaselinePolicy::Jit => {
                let before = match self.contact.iter().position(|&q| q == id) {
                    Some(p) => &self.contact[..p],
                    None => &self.contact[..],
                };
                before.iter().all(|&q| self.left(q, device) == 0)
            }
        }
    }

    /// Idempotent.
    pub fn on_dispatch(&mut self, id: usize) {
        if self.started.insert(id) {
            self.contact.push(id);
        }
    }

    /// One action of `id` on `device` reached a final state.
    pub fn on_final(&mut self, id: usize, device: &str) {
        if let Some(n) = self.remaining.get_mut(&id).and_then(|m| m.get_mut(device)) {
            *n = n.saturating_sub(1);
        }
    }
}

/// Runs the workload once per baseline policy with the same seed.
pub fn baseline_schedulers(workload: &Workload, devices: &[VirtualDevice], config: &PolicyConfig, seed: u64) -> Result<Vec<(BaselinePolicy, SimOutput)>, SimError> {
    BaselinePolicy::ALL
        .iter()
        .map(|&b| {
            let cfg = PolicyConfig { scheduling: b.scheduling(), ..config.clone() };
            crate::sim::run(workload, devices, &cfg, seed).map(|o| (b, o))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routine::tests::spec;

    fn dag(id: &str, devs: &[&str]) -> RoutineDag {
        let actions = devs.iter().enumerate().map(|(i, d)| spec(&format!("a{i}"), d)).collect();
        RoutineDag::new(id, None, actions, Vec::new()).unwrap()
    }

    #[test]
    fn fcfs_waits_for_every_earlier_routine() {
        let mut adm = Admission::new(BaselinePolicy::Fcfs);
        adm.add_routine(0, &dag("r0", &["x"]));
        adm.add_routine(1, &dag("r1", &["y"]));
        assert!(adm.may_start(0, "x"));
        assert!(!adm.may_start(1, "y"));
        adm.on_final(0, "x");
        assert!(adm.may_start(1, "y"));
    }

    #[test]
    fn fcfs_post_gates_only_on_shared_devices() {
        let mut adm = Admission::new(BaselinePolicy::FcfsPost);
        adm.add_routine(0, &dag("r0", &["x", "y"]));
        adm.add_routine(1, &dag("r1", &["z"]));
        adm.add_routine(2, &dag("r2", &["y", "z"]));
        assert!(adm.may_start(1, "z"));
        assert!(!adm.may_start(2, "z"));
        adm.on_final(0, "y");
        assert!(!adm.may_start(2, "z"), "r1 still holds z");
        adm.on_final(1, "z");
        assert!(adm.may_start(2, "y"));
    }

    #[test]
    fn jit_orders_by_first_contact() {
        let mut adm = Admission::new(BaselinePolicy::Jit);
        adm.add_routine(0, &dag("r0", &["x", "y"]));
        adm.add_routine(1, &dag("r1", &["y", "x"]));
        adm.on_dispatch(0);
        assert!(adm.may_start(1, "z"));
        assert!(!adm.may_start(1, "y"));
        adm.on_final(0, "y");
        assert!(adm.may_start(1, "y"));
        assert!(!adm.may_start(1, "x"));
    }
}
