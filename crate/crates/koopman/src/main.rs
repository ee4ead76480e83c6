//! Command-line front end: data collection, fitting, closed-loop runs,
//! parameter sweeps, and trace audits over a single JSON configuration whose
//! fields can all be overridden with `--key=value` flags.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use koopman::cli::{self, ExperimentConfig};
use koopman::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "koopman",
    version,
    about = "Koopman reduced-order models for model predictive control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment configuration (defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed (shorthand for --seed=N as an override)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads for sweeps
    #[arg(long)]
    jobs: Option<usize>,
    /// Config overrides of the form --key=value with dotted paths,
    /// e.g. --plant.viscosity=0.02 --anchors=[-0.1,0,0.1]
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--key=value"
    )]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the data-collection protocol and write per-control snapshot files
    Collect(CommonArgs),
    /// Fit Koopman models from collected snapshots and write the ensemble
    Fit(CommonArgs),
    /// Run the closed-loop controller and export trace, summary, and manifest
    Run(CommonArgs),
    /// Grid over dictionary degrees and data volumes, one closed loop per cell
    Sweep(CommonArgs),
    /// Recompute summary numbers from exported traces and report mismatches
    Audit(CommonArgs),
}

fn parse_overrides(args: &CommonArgs) -> Result<Vec<(String, String)>> {
    let mut overrides = Vec::new();
    for raw in &args.overrides {
        let stripped = raw
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("override {raw:?} must look like --key=value")))?;
        let (key, value) = stripped
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {raw:?} must look like --key=value")))?;
        overrides.push((key.to_string(), value.to_string()));
    }
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(dir) = &args.out_dir {
        let quoted = serde_json::to_string(dir).map_err(Error::from)?;
        overrides.push(("out_dir".into(), quoted));
    }
    if let Some(jobs) = args.jobs {
        overrides.push(("jobs".into(), jobs.to_string()));
    }
    Ok(overrides)
}

fn load(args: &CommonArgs) -> Result<ExperimentConfig> {
    let overrides = parse_overrides(args)?;
    cli::load_config(args.config.as_deref(), &overrides)
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Collect(args) => {
            let cfg = load(args)?;
            let summary = cli::cmd_collect(&cfg)?;
            for (j, (count, file)) in summary.pair_counts.iter().zip(&summary.files).enumerate() {
                println!(
                    "u{j} = {:+}: {count} pairs -> {}",
                    summary.anchors[j],
                    file.display()
                );
            }
        }
        Command::Fit(args) => {
            let cfg = load(args)?;
            let summary = cli::cmd_fit(&cfg)?;
            println!(
                "degree {} -> k = {} ({} kind)",
                summary.degree, summary.k, summary.kind
            );
            for ((u, m), file) in summary
                .controls
                .iter()
                .zip(&summary.pairs_used)
                .zip(&summary.model_files)
            {
                println!("u = {u:+}: {m} pairs -> {}", file.display());
            }
            println!("ensemble -> {}", summary.ensemble_file.display());
        }
        Command::Run(args) => {
            let cfg = load(args)?;
            let summary = cli::cmd_run(&cfg)?;
            println!(
                "{} surrogate, {} steps: total cost {:.6e}, mean solve {:.3e} s",
                summary.kind, summary.steps, summary.total_cost, summary.mean_solve_seconds
            );
            if let (Some(delta), Some(base)) = (summary.delta_j, summary.baseline_total_cost) {
                println!("baseline total cost {base:.6e}, delta J {delta:.6e}");
            }
        }
        Command::Sweep(args) => {
            let cfg = load(args)?;
            let cells = cli::cmd_sweep(&cfg)?;
            let failed = cells.iter().filter(|c| c.status != "ok").count();
            println!(
                "{} cells ({} failed) -> {}",
                cells.len(),
                failed,
                cfg.out_dir.join("sweep.csv").display()
            );
        }
        Command::Audit(args) => {
            let cfg = load(args)?;
            let report = cli::cmd_audit(&cfg)?;
            println!("audit ok: {} run(s) consistent", report.checked);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
