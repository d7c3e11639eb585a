//! Workloads: routines with arrival times, plus stock devices and generators.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ActionModel, BusyPolicy, DeviceMode, DurationModel, SimError, VirtualDevice};
use crate::routine::{parse_routine, serialize_routine, ActionSpec, Edge, EventKind, RoutineDag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalProcess {
    /// Arrivals spread uniformly at random over the horizon.
    Random,
    /// `burst_fraction` of the routines arrive in three Gaussian bursts at a
    /// quarter, half and three quarters of the horizon; the rest as `Random`.
    RandomPlusBursty { burst_fraction: f64 },
}

impl ArrivalProcess {
    pub fn bursty() -> Self {
        ArrivalProcess::RandomPlusBursty { burst_fraction: 0.5 }
    }
}

/// Routine templates plus how their arrivals are drawn.
#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub routines: Vec<RoutineDag>,
    pub arrival_process: ArrivalProcess,
    pub horizon: f64,
    pub seed: u64,
}

/// Width of each burst as a fraction of the horizon.
const BURST_SD: f64 = 1.0 / 40.0;

impl WorkloadSpec {
    /// Arrival times, one per routine in template order.
    pub fn arrivals(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        let n = self.routines.len();
        let h = self.horizon.max(0.0);
        let bursty = match self.arrival_process {
            ArrivalProcess::Random => 0,
            ArrivalProcess::RandomPlusBursty { burst_fraction } => ((n as f64) * burst_fraction.clamp(0.0, 1.0)).round() as usize,
        };
        let mut out: Vec<f64> = Vec::with_capacity(n);
        for i in 0..n {
            let t = if i < bursty && h > 0.0 {
                let centre = h * (1 + i % 3) as f64 / 4.0;
                Normal::new(centre, h * BURST_SD).expect("positive sd").sample(&mut rng).clamp(0.0, h)
            } else if h > 0.0 {
                rng.random_range(0.0..h)
            } else {
                0.0
            };
            out.push(t);
        }
        // Which template lands in which burst should not follow template order.
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let mut shuffled = vec![0.0; n];
        for (i, &j) in idx.iter().enumerate() {
            shuffled[j] = out[i];
        }
        shuffled
    }

    pub fn build(&self) -> Workload {
        let arrivals = self.arrivals();
        Workload {
            items: self.routines.iter().zip(arrivals).map(|(r, a)| WorkloadItem { routine: Arc::new(r.clone()), arrival: a }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadItem {
    pub routine: Arc<RoutineDag>,
    pub arrival: f64,
}

/// Concrete routines with arrival times; the simulator's input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Workload {
    pub items: Vec<WorkloadItem>,
}

#[derive(Serialize, Deserialize)]
struct RawItem {
    arrival: f64,
    routine: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct RawWorkload {
    routines: Vec<RawItem>,
}

impl Workload {
    pub fn new(items: Vec<(RoutineDag, f64)>) -> Self {
        Workload { items: items.into_iter().map(|(r, a)| WorkloadItem { routine: Arc::new(r), arrival: a }).collect() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `{"routines": [{"arrival": t, "routine": <routine document>}]}`.
    pub fn from_json(s: &str) -> Result<Self, SimError> {
        let raw: RawWorkload = serde_json::from_str(s).map_err(|e| SimError::Config(format!("workload: {e}")))?;
        let mut items = Vec::with_capacity(raw.routines.len());
        for (i, it) in raw.routines.into_iter().enumerate() {
            if !(it.arrival.is_finite() && it.arrival >= 0.0) {
                return Err(SimError::Config(format!("workload entry {i}: arrival must be finite and non-negative")));
            }
            let dag = parse_routine(&it.routine.to_string()).map_err(|e| SimError::Config(format!("workload entry {i}: {e}")))?;
            items.push(WorkloadItem { routine: Arc::new(dag), arrival: it.arrival });
        }
        Ok(Workload { items })
    }

    pub fn to_json(&self) -> String {
        let raw = RawWorkload {
            routines: self
                .items
                .iter()
                .map(|it| RawItem {
                    arrival: it.arrival,
                    routine: serde_json::from_str(&serialize_routine(&it.routine)).expect("routine documents are JSON"),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("workload serialises")
    }

    /// Every action names a known device and an action kind that device supports.
    pub fn check_devices(&self, devices: &[VirtualDevice]) -> Result<(), SimError> {
        let by_id: BTreeMap<&str, &VirtualDevice> = devices.iter().map(|d| (d.device_id.as_str(), d)).collect();
        for (i, it) in self.items.iter().enumerate() {
            for a in it.routine.actions() {
                let d = by_id
                    .get(a.device.as_str())
                    .ok_or_else(|| SimError::Config(format!("routine {i} ({}): unknown device {}", it.routine.id, a.device)))?;
                if !d.actions.contains_key(&a.action) {
                    return Err(SimError::Config(format!("routine {i}: device {} has no action {}", a.device, a.action)));
                }
            }
        }
        Ok(())
    }
}

/// Shape parameters for [`random_routines`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutineGen {
    pub min_actions: usize,
    pub max_actions: usize,
    /// Chance that an action after the first has no parent.
    pub extra_root: f64,
    /// Chance that a dependent action waits for its parent's start only.
    pub start_edge: f64,
    /// Chance that a dependent action is a fallback of its parent.
    pub fallback: f64,
    /// Relative chance of picking each device class; absent classes weigh 1.
    pub class_weight: BTreeMap<String, f64>,
}

impl Default for RoutineGen {
    fn default() -> Self {
        RoutineGen {
            min_actions: 1,
            max_actions: 4,
            extra_root: 0.2,
            start_edge: 0.15,
            fallback: 0.05,
            class_weight: BTreeMap::from([("thermostat".to_string(), 0.3), ("elevator".to_string(), 0.5)]),
        }
    }
}

/// `n` random routines over distinct devices each.
pub fn random_routines(n: usize, devices: &[VirtualDevice], gen: &RoutineGen, seed: u64) -> Vec<RoutineDag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let weight = |d: &VirtualDevice| gen.class_weight.get(&d.class).copied().unwrap_or(1.0).max(0.0);
    let max = gen.max_actions.min(devices.len()).max(1);
    let min = gen.min_actions.clamp(1, max);
    (0..n)
        .map(|r| {
            let k = rng.random_range(min..=max);
            let mut pool: Vec<&VirtualDevice> = devices.iter().filter(|d| !d.actions.is_empty()).collect();
            let mut actions = Vec::with_capacity(k);
            let mut edges = Vec::new();
            for i in 0..k {
                let total: f64 = pool.iter().map(|d| weight(d)).sum();
                if pool.is_empty() || total <= 0.0 {
                    break;
                }
                let mut x = rng.random_range(0.0..total);
                let pick = pool
                    .iter()
                    .position(|d| {
                        x -= weight(d);
                        x < 0.0
                    })
                    .unwrap_or(pool.len() - 1);
                let dev = pool.remove(pick);
                let kinds: Vec<&String> = dev.actions.keys().collect();
                let kind = kinds.choose(&mut rng).expect("device has actions");
                actions.push(ActionSpec {
                    id: format!("a{i}"),
                    device: dev.device_id.clone(),
                    action: (*kind).clone(),
                    params: Default::default(),
                    estimate: None,
                });
                if i > 0 && rng.random::<f64>() >= gen.extra_root {
                    let parent = rng.random_range(0..i);
                    let roll: f64 = rng.random();
                    let on = if roll < gen.fallback {
                        EventKind::Failure
                    } else if roll < gen.fallback + gen.start_edge {
                        EventKind::Start
                    } else {
                        EventKind::Complete
                    };
                    edges.push(Edge { parent, child: i, on });
                }
            }
            RoutineDag::new(&format!("r{r}"), None, actions, edges).expect("generated routines are acyclic")
        })
        .collect()
}

fn normal(mean: f64, sd: f64) -> DurationModel {
    DurationModel::Normal { mean, sd, min: (mean - 4.0 * sd).max(0.01) }
}

fn device(id: &str, class: &str, mode: DeviceMode, actions: Vec<(&str, ActionModel)>) -> VirtualDevice {
    VirtualDevice {
        device_id: id.to_string(),
        class: class.to_string(),
        mode,
        min_poll_interval: 0.1,
        busy_policy: BusyPolicy::Reject,
        ack_latency: 0.05,
        actions: actions.into_iter().map(|(k, m)| (k.to_string(), m)).collect(),
    }
}

fn model(a2s: DurationModel, s2c: DurationModel, progress: bool) -> ActionModel {
    ActionModel { ack_to_start: a2s, start_to_complete: s2c, reports_progress: progress, fail_prob: 0.0 }
}

/// One office floor: two doors, three shades, two lights, a projector
/// screen, an elevator and a thermostat.
pub fn office_devices() -> Vec<VirtualDevice> {
    let door = || {
        vec![
            ("close", model(normal(0.3, 0.05), normal(3.19, 0.19), false)),
            ("open", model(normal(0.3, 0.05), normal(3.06, 0.2), false)),
        ]
    };
    let shade = || {
        vec![
            ("up", model(normal(0.5, 0.1), normal(29.64, 1.2), true)),
            (
                "down",
                model(normal(0.5, 0.1), DurationModel::Bimodal { weight: 0.8, a: (26.5, 0.8), b: (31.25, 1.0) }, true),
            ),
        ]
    };
    let light = || vec![("on", model(normal(0.2, 0.05), normal(0.8, 0.1), false)), ("off", model(normal(0.2, 0.05), normal(0.8, 0.1), false))];
    let mut out = vec![
        device("door1", "door", DeviceMode::Pull, door()),
        device("door2", "door", DeviceMode::Pull, door()),
        device("shade1", "shade", DeviceMode::Pull, shade()),
        device("shade2", "shade", DeviceMode::Pull, shade()),
        device("shade3", "shade", DeviceMode::Pull, shade()),
        device("light1", "light", DeviceMode::Push, light()),
        device("light2", "light", DeviceMode::Push, light()),
        device(
            "screen1",
            "screen",
            DeviceMode::Pull,
            vec![("down", model(normal(0.4, 0.1), normal(14.0, 0.8), true)), ("up", model(normal(0.4, 0.1), normal(15.2, 0.8), true))],
        ),
        device("elevator1", "elevator", DeviceMode::Pull, vec![("call", model(normal(2.0, 0.5), normal(40.0, 10.0), false))]),
        device("thermostat1", "thermostat", DeviceMode::Pull, vec![("set", model(normal(1.0, 0.2), normal(432.17, 45.0), true))]),
    ];
    out.sort_by(|a, b| a.device_id.cmp(&b.device_id));
    out
}

pub fn devices_from_json(s: &str) -> Result<Vec<VirtualDevice>, SimError> {
    let devices: Vec<VirtualDevice> = serde_json::from_str(s).map_err(|e| SimError::Config(format!("devices: {e}")))?;
    for d in &devices {
        d.validate()?;
    }
    let mut ids: Vec<&str> = devices.iter().map(|d| d.device_id.as_str()).collect();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(SimError::Config("duplicate device id".into()));
    }
    Ok(devices)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_routines_use_known_devices() {
        let devs = office_devices();
        let rs = random_routines(50, &devs, &RoutineGen::default(), 7);
        let w = WorkloadSpec { routines: rs, arrival_process: ArrivalProcess::Random, horizon: 100.0, seed: 1 }.build();
        w.check_devices(&devs).unwrap();
        assert!(w.items.iter().all(|it| (0.0..100.0).contains(&it.arrival)));
    }

    #[test]
    fn bursty_arrivals_cluster() {
        let devs = office_devices();
        let rs = random_routines(300, &devs, &RoutineGen::default(), 3);
        let spec = WorkloadSpec { routines: rs, arrival_process: ArrivalProcess::bursty(), horizon: 4000.0, seed: 9 };
        let a = spec.arrivals();
        let near = |c: f64| a.iter().filter(|t| (*t - c).abs() < 300.0).count();
        // A 600 s window holds ~22 random arrivals; a burst adds ~50.
        assert!(near(1000.0) > 55 && near(2000.0) > 55 && near(3000.0) > 55);
        assert!(near(500.0) < 45);
        assert_eq!(a, spec.arrivals());
    }

    #[test]
    fn workload_json_round_trips() {
        let devs = office_devices();
        let w = WorkloadSpec { routines: random_routines(5, &devs, &RoutineGen::default(), 1), arrival_process: ArrivalProcess::Random, horizon: 10.0, seed: 2 }.build();
        let back = Workload::from_json(&w.to_json()).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in w.items.iter().zip(&back.items) {
            assert_eq!(a.arrival, b.arrival);
            assert_eq!(a.routine.actions(), b.routine.actions());
            assert_eq!(a.routine.edges(), b.routine.edges());
        }
    }

    #[test]
    fn device_file_round_trips() {
        let devs = office_devices();
        let s = serde_json::to_string(&devs).unwrap();
        assert_eq!(devices_from_json(&s).unwrap(), devs);
    }
}
