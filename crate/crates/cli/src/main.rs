use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use edge_offload::harness::{self, ExperimentConfig, RunSummary};
use edge_offload::policy::PolicyKind;
use edge_offload::Error;

#[derive(Parser)]
#[command(name = "edge-offload", version, about = "Energy-aware peer offloading among small base stations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured policies and write per-slot and summary CSVs.
    Run(Common),
    /// Run two or more policies on identical slot streams.
    Compare(Common),
    /// Repeat the experiment over the values of the config's [sweep] section.
    Sweep(Common),
    /// Check the solvers against brute force on random small instances.
    Validate {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; the built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    replications: Option<usize>,
    /// Policy to run; repeat for several. Overrides the config's list.
    #[arg(long = "policy")]
    policies: Vec<PolicyKind>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.experiment.seed = s;
            cfg.experiment.seeds.clear();
        }
        if let Some(h) = self.horizon {
            cfg.experiment.horizon = h;
        }
        if let Some(r) = self.replications {
            cfg.experiment.replications = r;
        }
        if !self.policies.is_empty() {
            cfg.experiment.policies = self.policies.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_summaries(summaries: &[RunSummary]) {
    println!(
        "{:<10} {:>4} {:>5} {:>12} {:>12} {:>12} {:>10} {:>8}",
        "policy", "rep", "n_sbs", "avg_delay", "avg_energy", "final_q/t", "dropped", "fallbacks"
    );
    for s in summaries {
        println!(
            "{:<10} {:>4} {:>5} {:>12.4} {:>12.4} {:>12.5} {:>10.2} {:>8}",
            s.policy.as_str(),
            s.replication,
            s.n_sbs,
            s.avg_delay,
            s.avg_energy,
            s.final_time_avg_deficit,
            s.dropped_total,
            s.fallback_slots
        );
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(c) => {
            let cfg = c.load()?;
            print_summaries(&harness::run_experiment(&cfg, c.out.as_deref())?);
        }
        Command::Compare(c) => {
            let mut cfg = c.load()?;
            if c.policies.is_empty() && cfg.experiment.policies.len() < 2 {
                cfg.experiment.policies = PolicyKind::ALL.to_vec();
            }
            print_summaries(&harness::compare_policies(&cfg, c.out.as_deref())?);
        }
        Command::Sweep(c) => {
            let cfg = c.load()?;
            let parameter = cfg.sweep.as_ref().context("config has no [sweep] section")?.parameter;
            for point in harness::sweep(&cfg, c.out.as_deref())? {
                println!("{} = {}", parameter.as_str(), point.value);
                print_summaries(&point.summaries);
            }
        }
        Command::Validate { instances, seed } => {
            let report = harness::validate_solvers(instances, seed);
            println!(
                "{} instances, worst oracle gap {:e}, worst equilibrium gain {:e}",
                report.instances, report.worst_gap, report.worst_ne_gain
            );
            for f in &report.failures {
                println!("FAIL {f}");
            }
            if !report.passed() {
                bail!("{} of {} instances failed", report.failures.len(), report.instances);
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::Parameter(_)) => 2,
        Some(Error::Io { .. }) => 3,
        Some(Error::Feasibility { .. }) | Some(Error::Domain(_)) => 4,
        Some(Error::NonConvergence { .. }) => 5,
        Some(Error::Internal(_)) => 6,
        None => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
