use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flashback::config::load_config;
use flashback::experiment::{cmd_metrics, cmd_run, cmd_sweep, SweepParam};
use flashback::knowledge::Category;
use flashback::theory::{run_suite, SuiteOptions};

#[derive(Parser)]
#[command(
    name = "flashback",
    about = "Two-phase bidirectionally regularized continual learning: experiment runner, theory checks and metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, host, mode) combination of a config and write
    /// matrices, results.csv, ttest.csv and budget.csv.
    Run {
        /// Path to a key-value config file.
        config: PathBuf,
        /// Also write long-format plot_data.csv.
        #[arg(long)]
        emit_plot_data: bool,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run the numerical theory checks and print one line per check.
    Theory {
        /// Random cases per identity check.
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Override every check's tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Restrict to one host category (distill, replay, reg, dyn).
        #[arg(long)]
        category: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep one hyperparameter over a value list, one run batch per value.
    Sweep {
        config: PathBuf,
        /// Parameter to sweep: alpha_p or e1.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Recompute all metrics from a stored accuracy-matrix CSV.
    Metrics {
        matrix: PathBuf,
    },
}

fn output_override(cli_flag: Option<PathBuf>) -> Option<PathBuf> {
    cli_flag.or_else(|| std::env::var("FLASHBACK_OUTPUT_DIR").ok().map(PathBuf::from))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> flashback::Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            emit_plot_data,
            output_dir,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(dir) = output_override(output_dir) {
                cfg.output_dir = dir;
            }
            let summary = cmd_run(&cfg, emit_plot_data)?;
            for o in &summary.outcomes {
                println!(
                    "run host={} mode={} seed={} budget={}",
                    o.job.host.category.name(),
                    o.job.mode.name(),
                    o.job.seed,
                    if o.budget.pass { "ok" } else { "VIOLATION" }
                );
            }
            for (job, msg) in &summary.failures {
                eprintln!(
                    "FAILED host={} mode={} seed={}: {msg}",
                    job.host.category.name(),
                    job.mode.name(),
                    job.seed
                );
            }
            println!(
                "wrote {} result rows to {}",
                summary.rows.len(),
                summary.output_dir.join("results.csv").display()
            );
            Ok(if summary.all_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Theory {
            cases,
            tolerance,
            category,
            seed,
        } => {
            let opts = SuiteOptions {
                cases,
                seed,
                tolerance,
                category: category.as_deref().map(Category::parse).transpose()?,
            };
            let reports = run_suite(&opts)?;
            let mut all_pass = true;
            for r in &reports {
                println!(
                    "{} {} max_discrepancy={:.3e} tolerance={:.3e}",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_discrepancy,
                    r.tolerance
                );
                all_pass &= r.pass;
            }
            Ok(if all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Sweep {
            config,
            param,
            values,
            output_dir,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(dir) = output_override(output_dir) {
                cfg.output_dir = dir;
            }
            let param = SweepParam::parse(&param)?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| {
                    v.trim().parse().map_err(|_| {
                        flashback::Error::InvalidArgument(format!("bad sweep value '{v}'"))
                    })
                })
                .collect::<flashback::Result<_>>()?;
            let summary = cmd_sweep(&cfg, param, &values)?;
            println!(
                "sweep wrote {} rows to {} (budget {})",
                summary.rows.len(),
                cfg.output_dir.join("sweep.csv").display(),
                if summary.budgets_pass { "ok" } else { "VIOLATION" }
            );
            for (value, job, msg) in &summary.failures {
                eprintln!(
                    "FAILED value={value} host={} mode={} seed={}: {msg}",
                    job.host.category.name(),
                    job.mode.name(),
                    job.seed
                );
            }
            Ok(if summary.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Metrics { matrix } => {
            print!("{}", cmd_metrics(&matrix)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
