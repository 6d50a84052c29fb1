use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qlsched::runner::{load_config, run_plan, ConfigError, RunError};
use qlsched::workload::{generate_workload, write_trace};
use qlsched::PolicyKind;

#[derive(Parser)]
#[command(name = "qlsched", version, about = "Cloud task-scheduling experiments with a Q-learning dispatcher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment plan and write runs.csv, summary.csv and convergence.csv.
    Run(RunArgs),
    /// Write a synthetic workload trace for the config's scenario.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Overrides the scenario's task count.
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Restrict to these policies (repeatable).
    #[arg(long = "policy")]
    policies: Vec<PolicyKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the failure sweep (repeatable).
    #[arg(long = "failure-ratio")]
    failure_ratios: Vec<f64>,
    /// Length class width in MI.
    #[arg(long)]
    range: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon0: Option<f64>,
    #[arg(long)]
    repeater_max: Option<u64>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut plan = load_config(&args.config)?;
    if !args.policies.is_empty() {
        plan.policies = args.policies;
    }
    if !args.failure_ratios.is_empty() {
        plan.failure_ratios = args.failure_ratios;
    }
    plan.seed = args.seed.unwrap_or(plan.seed);
    plan.replications = args.replications.unwrap_or(plan.replications);
    plan.output = args.out.unwrap_or(plan.output);
    plan.range_mi = args.range.unwrap_or(plan.range_mi);
    plan.learner.gamma = args.gamma.unwrap_or(plan.learner.gamma);
    plan.learner.epsilon0 = args.epsilon0.unwrap_or(plan.learner.epsilon0);
    plan.learner.repeater_max = args.repeater_max.unwrap_or(plan.learner.repeater_max);
    plan.validate()?;
    for path in run_plan(&plan)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn generate(config: PathBuf, seed: u64, tasks: Option<usize>, out: PathBuf) -> Result<(), Failure> {
    let mut scenario = load_config(&config)?.scenario;
    scenario.num_tasks = tasks.unwrap_or(scenario.num_tasks);
    scenario.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let tasks = generate_workload(&scenario, seed).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(&out, write_trace(&tasks)).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    println!("{}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Generate { config, seed, tasks, out } => generate(config, seed, tasks, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
