//! Experiment configuration, replication runs and CSV export.
//!
//! Output layout under the experiment's output directory:
//!
//! - `<policy>/rep<r>_slots.csv`: one row per slot (see [`SLOT_COLUMNS`]).
//! - `<policy>/rep<r>_sbs.csv`: one row per slot and SBS (see [`SBS_COLUMNS`]).
//! - `summary.csv`: one row per policy and replication (see [`SUMMARY_COLUMNS`]).
//! - `comparison_rep<r>.csv`: per-slot delay, objective and queue of every
//!   policy side by side, when more than one policy runs.
//! - `timing.csv`: per-slot solver wall-clock time. Kept apart so that the
//!   other files are byte-identical across runs with the same seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::central::solve_per_slot_centralized;
use crate::error::{Error, Result};
use crate::game::{round_robin_ne, verify_ne, DEFAULT_CONVERGENCE_TOLERANCE, DEFAULT_MAX_ROUNDS};
use crate::lyapunov::{decision_dependent_objective, run_open, FallbackPolicy, RunOptions, SlotMetrics};
use crate::model::{NetworkConfig, SlotState, DEFAULT_STABILITY_MARGIN};
use crate::oracle::brute_force_oracle;
use crate::policy::{make_policy, PolicyKind};
use crate::scenario::{ArrivalModel, ScenarioConfig, ScenarioStream};

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

pub const SLOT_COLUMNS: [&str; 17] = [
    "slot",
    "arrivals",
    "dropped",
    "lan_traffic",
    "delay_computation",
    "delay_congestion",
    "delay_communication",
    "delay_total",
    "energy",
    "queue_total",
    "objective",
    "objective_decision_dependent",
    "poa",
    "energy_over_budget",
    "energy_cap_violations",
    "delay_cap_violations",
    "note",
];

pub const SBS_COLUMNS: [&str; 11] = [
    "slot",
    "sbs",
    "arrivals",
    "workload",
    "dropped",
    "energy",
    "budget",
    "queue",
    "delay_computation",
    "delay_congestion",
    "delay_communication",
];

pub const SUMMARY_COLUMNS: [&str; 22] = [
    "policy",
    "replication",
    "seed",
    "n_sbs",
    "horizon",
    "avg_delay",
    "avg_delay_computation",
    "avg_delay_congestion",
    "avg_delay_communication",
    "avg_energy",
    "avg_queue_total",
    "final_queue_total",
    "peak_time_avg_deficit",
    "final_time_avg_deficit",
    "avg_lan_traffic",
    "avg_objective",
    "mean_poa",
    "max_poa",
    "poa_slots",
    "dropped_total",
    "energy_over_budget",
    "fallback_slots",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub policies: Vec<PolicyKind>,
    pub horizon: usize,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub workers: usize,
    pub output: PathBuf,
}

/// Per-SBS network parameters; every SBS drawn by the topology gets the same.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkParams {
    pub cpu_hz: f64,
    pub cycles_per_task: f64,
    pub lan_delay: f64,
    pub energy_per_task: f64,
    pub energy_budget: f64,
    pub slot_scale: f64,
    pub per_slot_energy_cap: f64,
    #[serde(default)]
    pub per_slot_delay_cap: Option<f64>,
    pub control_v: f64,
    #[serde(default = "default_margin")]
    pub stability_margin: f64,
}

fn default_margin() -> f64 {
    DEFAULT_STABILITY_MARGIN
}

impl NetworkParams {
    pub fn service_rate(&self) -> f64 {
        self.cpu_hz / self.cycles_per_task
    }

    pub fn network(&self, n_sbs: usize) -> NetworkConfig {
        NetworkConfig {
            service_rates: vec![self.service_rate(); n_sbs],
            lan_delay: self.lan_delay,
            energy_per_task: self.energy_per_task,
            energy_budgets: vec![self.energy_budget; n_sbs],
            per_slot_energy_cap: self.per_slot_energy_cap,
            per_slot_delay_cap: self.per_slot_delay_cap.unwrap_or(f64::INFINITY),
            control_v: self.control_v,
            slot_scale: self.slot_scale,
            stability_margin: self.stability_margin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    ControlV,
    SigmaFraction,
}

impl SweepParameter {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ControlV => "control_v",
            Self::SigmaFraction => "sigma_fraction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub network: NetworkParams,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parse(DEFAULT_CONFIG).expect("shipped default config parses")
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if e.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if e.policies.is_empty() {
            return Err(Error::Config("at least one policy is required".into()));
        }
        if !e.seeds.is_empty() && e.seeds.len() < e.replications {
            return Err(Error::Config(format!("{} seeds for {} replications", e.seeds.len(), e.replications)));
        }
        self.scenario.validate()?;
        self.network.network(1).validate().map_err(|err| Error::Config(err.to_string()))?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep needs at least one value".into()));
            }
            if s.parameter == SweepParameter::SigmaFraction && !matches!(self.scenario.arrival, ArrivalModel::Grid { .. }) {
                return Err(Error::Config("a sigma_fraction sweep needs the grid arrival model".into()));
            }
        }
        Ok(())
    }

    pub fn seed_for(&self, replication: usize) -> u64 {
        self.experiment
            .seeds
            .get(replication)
            .copied()
            .unwrap_or(self.experiment.seed.wrapping_add(replication as u64))
    }

    /// A copy with one sweep parameter set.
    pub fn with_parameter(&self, parameter: SweepParameter, value: f64) -> Result<Self> {
        let mut cfg = self.clone();
        match parameter {
            SweepParameter::ControlV => cfg.network.control_v = value,
            SweepParameter::SigmaFraction => match &mut cfg.scenario.arrival {
                ArrivalModel::Grid { sigma_fraction, .. } => *sigma_fraction = value,
                _ => return Err(Error::Config("sigma_fraction applies to the grid arrival model only".into())),
            },
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One policy on one replication.
#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub policy: PolicyKind,
    pub replication: usize,
    pub seed: u64,
    pub n_sbs: usize,
    pub metrics: Vec<SlotMetrics>,
}

/// Generates the scenario stream of one replication.
pub fn replication_stream(cfg: &ExperimentConfig, replication: usize) -> Result<(NetworkConfig, Vec<SlotState>)> {
    let seed = cfg.seed_for(replication);
    let stream = ScenarioStream::new(&cfg.scenario, seed)?;
    let network = cfg.network.network(stream.n_sbs());
    let states = stream.take(cfg.experiment.horizon).collect();
    Ok((network, states))
}

/// Runs every configured policy on the same stream of one replication.
pub fn run_replication(cfg: &ExperimentConfig, replication: usize) -> Result<Vec<PolicyRun>> {
    let (network, states) = replication_stream(cfg, replication)?;
    run_on_states(cfg, replication, &network, &states)
}

pub fn run_on_states(
    cfg: &ExperimentConfig,
    replication: usize,
    network: &NetworkConfig,
    states: &[SlotState],
) -> Result<Vec<PolicyRun>> {
    let options = RunOptions {
        horizon: states.len(),
        fallback: FallbackPolicy::ClampNoOffload,
    };
    cfg.experiment
        .policies
        .iter()
        .map(|&policy| {
            let mut p = make_policy(policy);
            let metrics = run_open(p.as_mut(), states.iter().cloned(), network, options)?;
            Ok(PolicyRun {
                policy,
                replication,
                seed: cfg.seed_for(replication),
                n_sbs: network.n_sbs(),
                metrics,
            })
        })
        .collect()
}

/// Runs all replications in parallel, without writing anything.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Vec<PolicyRun>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.experiment.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let per_rep: Vec<Result<Vec<PolicyRun>>> =
        pool.install(|| (0..cfg.experiment.replications).into_par_iter().map(|r| run_replication(cfg, r)).collect());
    let mut runs = Vec::new();
    for r in per_rep {
        runs.extend(r?);
    }
    Ok(runs)
}

/// Time-averaged summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub policy: PolicyKind,
    pub replication: usize,
    pub seed: u64,
    pub n_sbs: usize,
    pub horizon: usize,
    pub avg_delay: f64,
    pub avg_delay_computation: f64,
    pub avg_delay_congestion: f64,
    pub avg_delay_communication: f64,
    pub avg_energy: f64,
    pub avg_queue_total: f64,
    pub final_queue_total: f64,
    pub peak_time_avg_deficit: f64,
    pub final_time_avg_deficit: f64,
    pub avg_lan_traffic: f64,
    pub avg_objective: f64,
    pub mean_poa: Option<f64>,
    pub max_poa: Option<f64>,
    pub poa_slots: usize,
    pub dropped_total: f64,
    /// SBS-slots whose energy exceeded the budget.
    pub energy_over_budget: usize,
    /// Slots where the policy failed and the fallback served them.
    pub fallback_slots: usize,
}

/// Σ_i q_i(t)/t for t = 1..T, using the queue at the start of slot t.
pub fn time_averaged_deficit(metrics: &[SlotMetrics]) -> Vec<f64> {
    metrics.iter().skip(1).map(|m| m.queue_total / m.slot as f64).collect()
}

fn over_budget(m: &SlotMetrics) -> usize {
    m.sbs.iter().filter(|s| s.energy > s.budget + 1e-9).count()
}

pub fn summarize(run: &PolicyRun) -> RunSummary {
    let t = run.metrics.len() as f64;
    let avg = |f: &dyn Fn(&SlotMetrics) -> f64| run.metrics.iter().map(f).sum::<f64>() / t;
    let deficit = time_averaged_deficit(&run.metrics);
    let poas: Vec<f64> = run.metrics.iter().filter_map(|m| m.poa).collect();
    RunSummary {
        policy: run.policy,
        replication: run.replication,
        seed: run.seed,
        n_sbs: run.n_sbs,
        horizon: run.metrics.len(),
        avg_delay: avg(&|m| m.total_delay()),
        avg_delay_computation: avg(&|m| m.delay.computation),
        avg_delay_congestion: avg(&|m| m.delay.congestion),
        avg_delay_communication: avg(&|m| m.delay.communication),
        avg_energy: avg(&|m| m.energy),
        avg_queue_total: avg(&|m| m.queue_total),
        final_queue_total: run.metrics.last().map_or(0.0, |m| m.queue_total),
        peak_time_avg_deficit: deficit.iter().copied().fold(0.0, f64::max),
        final_time_avg_deficit: deficit.last().copied().unwrap_or(0.0),
        avg_lan_traffic: avg(&|m| m.lan_traffic),
        avg_objective: avg(&|m| m.objective.value),
        mean_poa: (!poas.is_empty()).then(|| poas.iter().sum::<f64>() / poas.len() as f64),
        max_poa: poas.iter().copied().reduce(f64::max),
        poa_slots: poas.len(),
        dropped_total: run.metrics.iter().map(|m| m.total_dropped()).sum(),
        energy_over_budget: run.metrics.iter().map(over_budget).sum(),
        fallback_slots: run.metrics.iter().filter(|m| m.fallback).count(),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_run(dir: &Path, run: &PolicyRun) -> Result<()> {
    let base = dir.join(run.policy.as_str());
    let slots = run.metrics.iter().map(|m| {
        vec![
            m.slot.to_string(),
            m.sbs.iter().map(|s| s.arrivals).sum::<f64>().to_string(),
            m.total_dropped().to_string(),
            m.lan_traffic.to_string(),
            m.delay.computation.to_string(),
            m.delay.congestion.to_string(),
            m.delay.communication.to_string(),
            m.total_delay().to_string(),
            m.energy.to_string(),
            m.queue_total.to_string(),
            m.objective.value.to_string(),
            m.objective.decision_dependent.to_string(),
            opt(m.poa),
            over_budget(m).to_string(),
            m.energy_cap_violations.to_string(),
            m.delay_cap_violations.to_string(),
            m.note.clone().unwrap_or_default(),
        ]
    });
    write_rows(&base.join(format!("rep{}_slots.csv", run.replication)), &SLOT_COLUMNS, slots)?;
    let sbs = run.metrics.iter().flat_map(|m| {
        m.sbs.iter().enumerate().map(move |(i, s)| {
            vec![
                m.slot.to_string(),
                i.to_string(),
                s.arrivals.to_string(),
                s.workload.to_string(),
                s.dropped.to_string(),
                s.energy.to_string(),
                s.budget.to_string(),
                s.queue.to_string(),
                s.delay.computation.to_string(),
                s.delay.congestion.to_string(),
                s.delay.communication.to_string(),
            ]
        })
    });
    write_rows(&base.join(format!("rep{}_sbs.csv", run.replication)), &SBS_COLUMNS, sbs)
}

fn summary_row(s: &RunSummary) -> Vec<String> {
    vec![
        s.policy.to_string(),
        s.replication.to_string(),
        s.seed.to_string(),
        s.n_sbs.to_string(),
        s.horizon.to_string(),
        s.avg_delay.to_string(),
        s.avg_delay_computation.to_string(),
        s.avg_delay_congestion.to_string(),
        s.avg_delay_communication.to_string(),
        s.avg_energy.to_string(),
        s.avg_queue_total.to_string(),
        s.final_queue_total.to_string(),
        s.peak_time_avg_deficit.to_string(),
        s.final_time_avg_deficit.to_string(),
        s.avg_lan_traffic.to_string(),
        s.avg_objective.to_string(),
        opt(s.mean_poa),
        opt(s.max_poa),
        s.poa_slots.to_string(),
        s.dropped_total.to_string(),
        s.energy_over_budget.to_string(),
        s.fallback_slots.to_string(),
    ]
}

fn write_comparison(dir: &Path, runs: &[&PolicyRun]) -> Result<()> {
    let Some(first) = runs.first() else {
        return Ok(());
    };
    let mut header = vec!["slot".to_string()];
    for r in runs {
        for col in ["delay", "objective", "queue_total"] {
            header.push(format!("{}_{col}", r.policy));
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..first.metrics.len()).map(|t| {
        let mut row = vec![t.to_string()];
        for r in runs {
            let m = &r.metrics[t];
            row.push(m.total_delay().to_string());
            row.push(m.objective.value.to_string());
            row.push(m.queue_total.to_string());
        }
        row
    });
    write_rows(&dir.join(format!("comparison_rep{}.csv", first.replication)), &header, rows)
}

fn write_timing(dir: &Path, runs: &[PolicyRun]) -> Result<()> {
    let rows = runs.iter().flat_map(|r| {
        r.metrics.iter().map(move |m| {
            vec![r.policy.to_string(), r.replication.to_string(), m.slot.to_string(), m.solve_micros.to_string()]
        })
    });
    write_rows(&dir.join("timing.csv"), &["policy", "replication", "slot", "solve_micros"], rows)
}

/// Runs the experiment and writes its files to `out` (or the configured
/// output directory). Returns the summaries, ordered by policy and
/// replication.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<RunSummary>> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.experiment.output.clone());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut runs = simulate(cfg)?;
    runs.sort_by_key(|r| (cfg.experiment.policies.iter().position(|p| *p == r.policy), r.replication));
    runs.par_iter().map(|r| write_run(&dir, r)).collect::<Result<Vec<()>>>()?;
    if cfg.experiment.policies.len() > 1 {
        for rep in 0..cfg.experiment.replications {
            let group: Vec<&PolicyRun> = runs.iter().filter(|r| r.replication == rep).collect();
            write_comparison(&dir, &group)?;
        }
    }
    write_timing(&dir, &runs)?;
    let summaries: Vec<RunSummary> = runs.iter().map(summarize).collect();
    write_rows(&dir.join("summary.csv"), &SUMMARY_COLUMNS, summaries.iter().map(summary_row))?;
    Ok(summaries)
}

/// Replays one stream per replication through at least two policies.
pub fn compare_policies(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<RunSummary>> {
    if cfg.experiment.policies.len() < 2 {
        return Err(Error::Config("compare needs at least two policies".into()));
    }
    run_experiment(cfg, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub summaries: Vec<RunSummary>,
}

/// Runs the experiment once per sweep value, each into its own
/// subdirectory, and writes `sweep_summary.csv`.
pub fn sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<SweepPoint>> {
    let plan = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep needs a [sweep] section".into()))?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.experiment.output.clone());
    let mut points = Vec::new();
    for &value in &plan.values {
        let point_cfg = cfg.with_parameter(plan.parameter, value)?;
        let sub = dir.join(format!("{}_{value}", plan.parameter.as_str()));
        let summaries = run_experiment(&point_cfg, Some(&sub))?;
        points.push(SweepPoint { value, summaries });
    }
    let mut header = vec![plan.parameter.as_str()];
    header.extend(SUMMARY_COLUMNS);
    let rows = points.iter().flat_map(|p| {
        p.summaries.iter().map(move |s| {
            let mut row = vec![p.value.to_string()];
            row.extend(summary_row(s));
            row
        })
    });
    write_rows(&dir.join("sweep_summary.csv"), &header, rows)?;
    Ok(points)
}

/// Outcome of checking the solvers on random small instances.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub instances: usize,
    /// Largest (solver − oracle)/oracle objective gap.
    pub worst_gap: f64,
    /// Largest unilateral improvement found at a computed equilibrium,
    /// relative to the total cost.
    pub worst_ne_gain: f64,
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Random instance with N SBSs, service rates, loads, queues and V spread
/// over the ranges the experiments use.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (NetworkConfig, SlotState) {
    let mut cfg = NetworkConfig::homogeneous(n, 75.0, 0.2, 0.324, 22.0, 50.0);
    cfg.service_rates = (0..n).map(|_| rng.random_range(40.0..110.0)).collect();
    cfg.control_v = [1.0, 10.0, 50.0, 100.0, 500.0][rng.random_range(0..5)];
    let arrivals = cfg.service_rates.iter().map(|&mu| rng.random_range(0.0..0.97) * mu).collect();
    let queues = (0..n)
        .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..100.0) })
        .collect();
    let mut st = SlotState::from_arrivals(arrivals).with_queues(queues);
    st.uplink_delay = (0..n).map(|_| rng.random_range(0.0..0.1)).collect();
    st.tx_energy = (0..n).map(|_| rng.random_range(0.0..0.01)).collect();
    (cfg, st)
}

/// Compares the centralized solver with the brute-force oracle and checks
/// computed equilibria on `instances` random instances with N ∈ {2, 3, 4}.
pub fn validate_solvers(instances: usize, seed: u64) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ValidationReport {
        instances,
        worst_gap: 0.0,
        worst_ne_gain: 0.0,
        failures: Vec::new(),
    };
    for k in 0..instances {
        let n = 2 + k % 3;
        let (cfg, st) = random_instance(&mut rng, n);
        let result = (|| -> Result<(f64, f64)> {
            let alloc = solve_per_slot_centralized(&cfg, &st, 1e-6)?;
            let ours = decision_dependent_objective(&alloc.post_workloads, alloc.lan_traffic, &cfg, &st)?;
            let oracle = brute_force_oracle(&cfg, &st)?;
            let gap = (ours - oracle.objective) / oracle.objective.abs().max(1e-300);
            let game = round_robin_ne(&cfg, &st, DEFAULT_CONVERGENCE_TOLERANCE, DEFAULT_MAX_ROUNDS)?;
            let total: f64 = game.full_costs.iter().sum();
            let verdict = verify_ne(&game.profile, &cfg, &st, DEFAULT_CONVERGENCE_TOLERANCE * total, 50, k as u64)?;
            Ok((gap, verdict.worst_improvement / total))
        })();
        match result {
            Ok((gap, gain)) => {
                report.worst_gap = report.worst_gap.max(gap);
                report.worst_ne_gain = report.worst_ne_gain.max(gain);
                if gap > 1e-6 {
                    report.failures.push(format!("instance {k}: solver above oracle by {gap:e}"));
                }
                if gain > DEFAULT_CONVERGENCE_TOLERANCE {
                    report.failures.push(format!("instance {k}: equilibrium improvable by {gain:e}"));
                }
            }
            Err(e) => report.failures.push(format!("instance {k}: {e}")),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.horizon = 5;
        cfg.scenario.ue_min = 20;
        cfg.scenario.ue_max = 40;
        cfg
    }

    #[test]
    fn shipped_config_parses_and_validates() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.network.service_rate(), 75.0);
        assert_eq!(cfg.experiment.policies, vec![PolicyKind::OpenC]);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let text = DEFAULT_CONFIG.replace("horizon = 3000", "horizon = 0");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Config(_))));
        let text = DEFAULT_CONFIG.replace("policies = [\"open_c\"]", "policies = [\"open_x\"]");
        assert!(ExperimentConfig::parse(&text).is_err());
        let text = DEFAULT_CONFIG.replace("replications = 1", "replications = 1\nbogus = 2");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn one_slot_one_sbs_keeps_everything_local() {
        let mut cfg = tiny();
        cfg.experiment.horizon = 1;
        cfg.scenario.density = 2e-6;
        let runs = simulate(&cfg).unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].n_sbs, 1);
        assert_eq!(runs[0].metrics.len(), 1);
        assert_eq!(runs[0].metrics[0].lan_traffic, 0.0);
    }

    #[test]
    fn aggregates_are_slot_means() {
        let cfg = tiny();
        let run = &simulate(&cfg).unwrap()[0];
        let s = summarize(run);
        let direct: f64 = run.metrics.iter().map(|m| m.total_delay()).sum::<f64>() / run.metrics.len() as f64;
        assert!((s.avg_delay - direct).abs() <= 1e-9 * direct);
        let parts = s.avg_delay_computation + s.avg_delay_congestion + s.avg_delay_communication;
        assert!((parts - s.avg_delay).abs() <= 1e-9 * s.avg_delay);
    }

    #[test]
    fn files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.experiment.policies = vec![PolicyKind::OpenC, PolicyKind::Nop];
        cfg.experiment.replications = 2;
        compare_policies(&cfg, Some(dir.path())).unwrap();
        for f in ["summary.csv", "timing.csv", "comparison_rep0.csv", "open_c/rep1_slots.csv", "nop/rep0_sbs.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 5);
        assert!(summary.starts_with(&SUMMARY_COLUMNS.join(",")));
    }

    #[test]
    fn validation_passes_on_a_few_instances() {
        let r = validate_solvers(6, 2);
        assert!(r.passed(), "{:?}", r.failures);
    }
}
