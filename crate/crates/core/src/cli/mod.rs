//! Command-line front end: fit traces, run experiment matrices, compare reports.
//!
//! Exit codes are 0 on success, 1 for invalid input and 2 for failures while
//! running. Diagnostics go to stderr as `error: <kind>: <message>`.

mod report;

pub use report::{aggregate_csv, compare_table, CellReport};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dist::{load_traces, DistError, DistributionExport, DistributionStore, EmpiricalDistribution, FitConfig, TraceError};
use crate::resched::ReschedConfig;
use crate::sim::{
    devices_from_json, office_devices, random_routines, ArrivalProcess, Interruption, PolicyConfig, PollingPolicy, RoutineGen, SchedulingPolicy, SimError,
    SimRun, VirtualDevice, Workload, WorkloadSpec,
};

#[derive(Debug, Parser)]
#[command(name = "rasc", version, about = "Action lifecycle tracking, adaptive polling and routine scheduling experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Replaces the config's seed list with this one seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Target share of completions detected within Q_w, in (0, 1]
    #[arg(long, global = true)]
    pub slo: Option<f64>,
    /// Detection window override, `class=seconds`; repeatable.
    #[arg(long = "qw", global = true, value_parser = parse_qw)]
    pub qw: Vec<(String, f64)>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fits one distribution per device, action and transition.
    Fit {
        /// CSV with columns device,action,transition,duration_s
        #[arg(long)]
        traces: PathBuf,
        /// Output directory; receives `distributions.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs every (policy, seed) cell of an experiment.
    Run {
        /// Experiment JSON; relative paths inside resolve against its directory
        #[arg(long)]
        config: PathBuf,
        /// Output directory for per-cell reports and `aggregate.csv`
        #[arg(long)]
        out: PathBuf,
        /// Also write each cell's trace and rescheduling audit.
        #[arg(long)]
        write_traces: bool,
    },
    /// Relative metric deltas of reports against the first one.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
    },
}

fn parse_qw(s: &str) -> Result<(String, f64), String> {
    let (class, v) = s.split_once('=').ok_or_else(|| format!("expected class=seconds, got {s:?}"))?;
    let q: f64 = v.trim().parse().map_err(|_| format!("{v:?} is not a number"))?;
    if class.trim().is_empty() || !(q > 0.0 && q.is_finite()) {
        return Err(format!("invalid Q_w override {s:?}"));
    }
    Ok((class.trim().to_string(), q))
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "error: validation: {m}"),
            CliError::Runtime(m) => write!(f, "error: runtime: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Runaway(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DistError> for CliError {
    fn from(e: DistError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn write(path: &Path, data: &str) -> Result<(), CliError> {
    fs::write(path, data).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// One polling and one scheduling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub polling: PollingPolicy,
    pub scheduling: SchedulingPolicy,
}

impl PolicySpec {
    pub fn label(&self) -> String {
        let polling = match self.polling {
            PollingPolicy::Adaptive => "adaptive",
            PollingPolicy::Periodic => "periodic",
            PollingPolicy::NoPolling => "no_polling",
        };
        format!("{}_{polling}", self.scheduling.label())
    }
}

/// Workload drawn per seed from the device set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSpec {
    pub routines: usize,
    pub arrival_process: ArrivalProcess,
    pub horizon: f64,
    /// Added to each run seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub shape: RoutineGen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Workload file; exclusive with `generate`.
    #[serde(default)]
    pub workload: Option<PathBuf>,
    #[serde(default)]
    pub generate: Option<GenerateSpec>,
    /// Device file; the built-in office set when absent.
    #[serde(default)]
    pub devices: Option<PathBuf>,
    /// Trace CSV or fitted-distribution JSON the hub starts from instead of training.
    #[serde(default)]
    pub traces: Option<PathBuf>,
    pub policies: Vec<PolicySpec>,
    #[serde(default)]
    pub q_w: BTreeMap<String, f64>,
    #[serde(default = "default_slo")]
    pub slo: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub perturbation: f64,
    #[serde(default)]
    pub network_delay: f64,
    #[serde(default)]
    pub resched: ReschedConfig,
    /// Ground-truth draws per transition the hub trains on when `traces` is absent.
    #[serde(default = "default_training")]
    pub training_samples: usize,
    #[serde(default)]
    pub interruptions: Vec<Interruption>,
}

fn default_training() -> usize {
    PolicyConfig::default().training_samples
}

fn default_slo() -> f64 {
    0.9
}

impl ExperimentConfig {
    /// Parses and validates a config; relative paths resolve against `base`.
    pub fn from_json(s: &str, base: &Path) -> Result<Self, CliError> {
        let c = Self::parse(s, base)?;
        c.validate()?;
        Ok(c)
    }

    /// As [`Self::from_json`] without validation, so overrides can apply first.
    pub fn parse(s: &str, base: &Path) -> Result<Self, CliError> {
        let mut c: ExperimentConfig = serde_json::from_str(s).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        for p in [&mut c.workload, &mut c.devices, &mut c.traces].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Validation(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.policies.is_empty() {
            return bad("policies must not be empty");
        }
        if self.workload.is_some() == self.generate.is_some() {
            return bad("give exactly one of workload and generate");
        }
        for p in [&self.workload, &self.devices, &self.traces].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::Validation(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn policy_config(&self, spec: PolicySpec) -> PolicyConfig {
        PolicyConfig {
            polling: spec.polling,
            scheduling: spec.scheduling,
            slo: self.slo,
            q_w: self.q_w.clone(),
            resched: self.resched,
            perturbation: self.perturbation,
            network_delay: self.network_delay,
            training_samples: self.training_samples,
            interruptions: self.interruptions.clone(),
        }
    }
}

/// Reads a trace CSV, or a distribution JSON written by `fit`.
pub fn load_knowledge(path: &Path) -> Result<DistributionStore, CliError> {
    let text = read(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let exports: Vec<DistributionExport> = serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut store = DistributionStore::new(FitConfig::smoothed());
        for ex in &exports {
            let key = ex.key.parse().map_err(|e: DistError| CliError::Validation(format!("{}: {e}", path.display())))?;
            store.insert(key, EmpiricalDistribution::import(ex)?);
        }
        Ok(store)
    } else {
        Ok(load_traces(text.as_bytes(), FitConfig::smoothed())?)
    }
}

pub fn cmd_fit(traces: &Path, out: &Path) -> Result<String, CliError> {
    let store = load_knowledge(traces)?;
    if store.is_empty() {
        return Err(CliError::Validation(format!("{}: no observations", traces.display())));
    }
    let mut lines = vec![format!("{:<40} {:>5} {:>10} {:>10}", "key", "n", "mean", "U")];
    let mut exports = Vec::with_capacity(store.len());
    for (key, d) in store.iter() {
        lines.push(format!("{:<40} {:>5} {:>10.3} {:>10.3}", key.to_string(), d.len(), d.mean()?, d.ppf(0.99)?));
        exports.push(d.export()?);
    }
    create_dir(out)?;
    write(&out.join("distributions.json"), &serde_json::to_string_pretty(&exports).expect("exports serialise"))?;
    Ok(lines.join("\n"))
}

fn workload_for(cfg: &ExperimentConfig, devices: &[VirtualDevice], seed: u64) -> Result<Workload, CliError> {
    match (&cfg.workload, &cfg.generate) {
        (Some(p), _) => Ok(Workload::from_json(&read(p)?)?),
        (None, Some(g)) => {
            let s = g.seed.wrapping_add(seed);
            let routines = random_routines(g.routines, devices, &g.shape, s);
            Ok(WorkloadSpec { routines, arrival_process: g.arrival_process, horizon: g.horizon, seed: s }.build())
        }
        (None, None) => unreachable!("validated"),
    }
}

/// Runs all cells and writes one report per cell plus `aggregate.csv`.
/// Returns the report paths.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, write_traces: bool) -> Result<Vec<PathBuf>, CliError> {
    let devices = match &cfg.devices {
        Some(p) => devices_from_json(&read(p)?)?,
        None => office_devices(),
    };
    let knowledge = cfg.traces.as_deref().map(load_knowledge).transpose()?;
    let workloads: Vec<(u64, Workload)> = cfg.seeds.iter().map(|&s| workload_for(cfg, &devices, s).map(|w| (s, w))).collect::<Result<_, _>>()?;
    let cells: Vec<(PolicySpec, usize)> = cfg.policies.iter().flat_map(|&p| (0..workloads.len()).map(move |i| (p, i))).collect();

    // Cells are independent; run them on a few threads, collect in order.
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cells.len()).max(1);
    let mut results: Vec<Option<Result<(CellReport, String, String), SimError>>> = (0..cells.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (chunk, slots) in cells.chunks(cells.len().div_ceil(threads)).zip(results.chunks_mut(cells.len().div_ceil(threads))) {
            let (devices, workloads, knowledge) = (&devices, &workloads, &knowledge);
            scope.spawn(move || {
                for (&(policy, wi), slot) in chunk.iter().zip(slots.iter_mut()) {
                    let (seed, wl) = &workloads[wi];
                    let mut run = SimRun::new(wl, devices, cfg.policy_config(policy), *seed);
                    if let Some(k) = knowledge {
                        run = run.with_knowledge(k);
                    }
                    *slot = Some(run.execute().map(|o| {
                        let audit = o.audit.iter().map(|a| serde_json::to_string(a).expect("audit serialises") + "\n").collect();
                        (CellReport::new(&cfg.name, policy, *seed, &o), o.trace.to_json_lines(), audit)
                    }));
                }
            });
        }
    });

    create_dir(out)?;
    let mut reports = Vec::with_capacity(cells.len());
    let mut paths = Vec::with_capacity(cells.len());
    for r in results {
        let (report, trace, audit) = r.expect("every cell ran")?;
        let stem = format!("{}_seed{}", report.policy.label(), report.seed);
        let path = out.join(format!("{stem}.json"));
        write(&path, &serde_json::to_string_pretty(&report).expect("report serialises"))?;
        if write_traces {
            let dir = out.join("traces");
            create_dir(&dir)?;
            write(&dir.join(format!("{stem}.jsonl")), &trace)?;
            write(&dir.join(format!("{stem}.audit.jsonl")), &audit)?;
        }
        paths.push(path);
        reports.push(report);
    }
    write(&out.join("aggregate.csv"), &aggregate_csv(&reports))?;
    Ok(paths)
}

pub fn cmd_compare(paths: &[PathBuf]) -> Result<String, CliError> {
    let reports: Vec<(String, CellReport)> = paths
        .iter()
        .map(|p| {
            let r: CellReport = serde_json::from_str(&read(p)?).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            Ok((p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()), r))
        })
        .collect::<Result<_, CliError>>()?;
    compare_table(&reports)
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(out) => {
            // A closed pipe downstream is not a failure of the command.
            if !out.is_empty() {
                let _ = writeln!(std::io::stdout().lock(), "{out}");
            }
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Fit { traces, out } => cmd_fit(traces, out),
        Command::Run { config, out, write_traces } => {
            let base = config.parent().unwrap_or(Path::new("."));
            let mut cfg = ExperimentConfig::parse(&read(config)?, base)?;
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            if let Some(slo) = cli.slo {
                cfg.slo = slo;
            }
            cfg.q_w.extend(cli.qw.iter().cloned());
            cfg.validate()?;
            let paths = cmd_run(&cfg, out, *write_traces)?;
            Ok(format!("{} reports and aggregate.csv written to {}", paths.len(), out.display()))
        }
        Command::Compare { reports } => cmd_compare(reports),
    }
}
