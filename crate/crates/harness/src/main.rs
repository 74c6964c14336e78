use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gluadfl::timeseries::{generate_synth_cohort, write_csv, SynthCohortSpec};
use gluadfl_harness::{
    compare_report, evaluate_checkpoint, run_plan, write_summary, ExperimentPlan, HarnessError, RunOptions,
};

/// Asynchronous decentralized federated learning for glucose prediction.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic CGM cohorts as CSV.
    Synth {
        /// Write every synthetic cohort of this plan to `<out>/<name>.csv`.
        #[arg(long, conflicts_with_all = ["patients", "days", "seed", "heterogeneity"])]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        patients: usize,
        #[arg(long, default_value_t = 14)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        heterogeneity: Option<f64>,
        /// Output file, or directory with `--plan`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every grid cell of a plan, then evaluate and report.
    Run {
        #[arg(long)]
        plan: PathBuf,
        /// Output directory; defaults to the plan's `output_dir`.
        #[arg(long, env = "GLUADFL_OUT")]
        out: Option<PathBuf>,
        #[arg(long, env = "GLUADFL_JOBS", default_value_t = 1)]
        jobs: usize,
        /// Replace the plan's seeds (repeatable).
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// Rebuild `summary.csv` from a finished run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved model on every cohort of a plan.
    Eval {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cohort whose normalization the model was trained with.
        #[arg(long)]
        train_cohort: String,
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_DIVERGED: u8 = 3;

fn run(cli: Cli) -> Result<u8, HarnessError> {
    match cli.command {
        Command::Synth {
            plan: Some(plan),
            out,
            ..
        } => {
            let plan = ExperimentPlan::load(&plan)?;
            std::fs::create_dir_all(&out)?;
            for source in &plan.cohorts {
                if let Some(spec) = &source.synthetic {
                    let path = out.join(format!("{}.csv", source.name));
                    write_csv(std::fs::File::create(&path)?, &generate_synth_cohort(spec)?)?;
                    println!("{}", path.display());
                }
            }
        }
        Command::Synth {
            plan: None,
            patients,
            days,
            seed,
            heterogeneity,
            out,
        } => {
            let mut spec = SynthCohortSpec::new(patients, days, seed);
            if let Some(h) = heterogeneity {
                spec.heterogeneity = h;
            }
            spec.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_csv(std::fs::File::create(&out)?, &generate_synth_cohort(&spec)?)?;
        }
        Command::Run { plan, out, jobs, seeds } => {
            let mut plan = ExperimentPlan::load(&plan)?;
            if !seeds.is_empty() {
                plan.seeds = seeds;
            }
            let out_dir = out.unwrap_or_else(|| plan.output_dir.clone());
            let summary = run_plan(&plan, &RunOptions { out_dir: out_dir.clone(), jobs })?;
            println!(
                "{} cells, {} diverged; artifacts in {}",
                summary.cells,
                summary.diverged,
                out_dir.display()
            );
            if summary.diverged > 0 {
                return Ok(EXIT_DIVERGED);
            }
        }
        Command::Report { out } => {
            let rows = compare_report(&out)?;
            write_summary(std::fs::File::create(out.join("summary.csv"))?, &rows)?;
            write_summary(std::io::stdout().lock(), &rows)?;
        }
        Command::Eval {
            plan,
            checkpoint,
            train_cohort,
            out,
        } => {
            let plan = ExperimentPlan::load(&plan)?;
            let n = evaluate_checkpoint(&plan, &checkpoint, &train_cohort, &out)?;
            println!("{n} patient rows written to {}", out.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
