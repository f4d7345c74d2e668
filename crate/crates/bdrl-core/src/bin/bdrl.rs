//! Command-line driver for configuring, running, and sweeping experiments.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;

use bdrl_core::experiment::{self, Algorithm, ExperimentConfig, GroupSelection, SweepPoint};
use bdrl_core::training::DivergencePenalty;
use bdrl_core::BdrlError;

#[derive(Parser, Debug)]
#[command(
    name = "bdrl",
    about = "Boosted distributional RL experiments on a synthetic treatment-planning cohort"
)]
struct Cli {
    /// JSON experiment configuration; flags below override its fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Algorithm: bdrl | drl | qlearning.
    #[arg(long)]
    algo: Option<String>,

    /// Pair-penalty divergence: w2 | kl | js.
    #[arg(long)]
    divergence: Option<String>,

    /// Penalty weight.
    #[arg(long)]
    lambda: Option<f64>,

    /// Projection tolerance.
    #[arg(long)]
    epsilon: Option<f64>,

    /// Fallback mixture weight.
    #[arg(long)]
    rho: Option<f64>,

    /// Lower bound on solved mixture weights.
    #[arg(long)]
    alpha_floor: Option<f64>,

    /// Cluster count or `auto` for elbow selection.
    #[arg(long)]
    groups: Option<String>,

    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,

    /// Minibatch size.
    #[arg(long)]
    batch_size: Option<usize>,

    /// Cohort size.
    #[arg(long)]
    agents: Option<usize>,

    /// Master seed for cohort, data collection, and training streams.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory for report.csv, convergence.csv, training.jsonl,
    /// projections.jsonl, batch_means.csv, config_resolved.json.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Sweep one key over comma-separated values, e.g.
    /// `--sweep lambda=0,0.01,0.1,0.5`; repeatable for a cartesian grid.
    #[arg(long, value_name = "KEY=V1,V2,...")]
    sweep: Vec<String>,

    /// Worker threads for sweep points (0 = one per logical CPU).
    #[arg(long)]
    workers: Option<usize>,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(algo) = &cli.algo {
        config.algo = algo.parse::<Algorithm>()?;
    }
    if let Some(divergence) = &cli.divergence {
        config.training.divergence_penalty = divergence.parse::<DivergencePenalty>()?;
    }
    if let Some(lambda) = cli.lambda {
        config.training.lambda = lambda;
    }
    if let Some(epsilon) = cli.epsilon {
        config.training.projection.epsilon = epsilon;
    }
    if let Some(rho) = cli.rho {
        config.training.projection.rho = rho;
    }
    if let Some(alpha_floor) = cli.alpha_floor {
        config.training.projection.alpha_floor = alpha_floor;
    }
    if let Some(groups) = &cli.groups {
        config.groups = match groups.parse::<usize>() {
            Ok(k) => GroupSelection::Fixed(k),
            Err(_) => GroupSelection::Named(groups.clone()),
        };
    }
    if let Some(epochs) = cli.epochs {
        config.training.epochs = epochs;
    }
    if let Some(batch_size) = cli.batch_size {
        config.training.minibatch_size = batch_size;
    }
    if let Some(agents) = cli.agents {
        config.n_agents = agents;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = Some(out.clone());
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    for spec in &cli.sweep {
        let (key, values) = spec.split_once('=').ok_or_else(|| {
            BdrlError::invalid_config("sweep", format!("expected KEY=V1,V2,..., got `{spec}`"))
        })?;
        config.sweep.insert(
            key.to_string(),
            values.split(',').map(str::to_string).collect(),
        );
    }
    Ok(config)
}

fn print_report(report: &experiment::ExperimentReport) {
    println!(
        "run {} algo={:?} seed={} groups={} wall={:.2}s",
        report.config_hash, report.algo, report.seed, report.chosen_k, report.wall_time_secs
    );
    println!("group  role        agent  mean_return");
    for row in &report.group_rows {
        println!(
            "{:>5}  {:<10}  {:>5}  {:>12.6}",
            row.group,
            format!("{:?}", row.kind).to_lowercase(),
            row.agent,
            row.mean_return
        );
    }
    if !report.final_trace.is_empty() {
        let trace: Vec<String> = report
            .final_trace
            .iter()
            .map(|(g, v)| format!("g{g}={v:.6}"))
            .collect();
        println!("final max-pair w2: {}", trace.join(" "));
    }
    if report.penalty_nonfinite_events > 0 || report.penalty_saturated_events > 0 {
        println!(
            "penalty events: nonfinite={} saturated={}",
            report.penalty_nonfinite_events, report.penalty_saturated_events
        );
    }
}

fn print_sweep(points: &[SweepPoint]) {
    for point in points {
        let overrides: Vec<String> = point
            .overrides
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        println!("== sweep point: {}", overrides.join(" "));
        print_report(&point.report);
    }
}

fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(bdrl) = cause.downcast_ref::<BdrlError>() {
            return match bdrl {
                BdrlError::InvalidConfig { .. } => 2,
                _ => 3,
            };
        }
        // Config-file loading failures are configuration errors.
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let config = match load_config(&cli) {
        Ok(config) => config,
        Err(err) => {
            eprintln!("config error: {err:#}");
            return ExitCode::from(2);
        }
    };
    let sweep_mode = !config.sweep.is_empty();
    let outcome: anyhow::Result<()> = if sweep_mode {
        experiment::sweep(&config)
            .map(|points| print_sweep(&points))
            .map_err(Into::into)
    } else {
        experiment::run(&config)
            .map(|report| print_report(&report))
            .map_err(Into::into)
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}
