use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};

use lco_lab::commands::{self, CommandError};
use lco_lab::suites::{format_report, run_suites, suite_names, GradientImpls};

#[derive(Parser)]
#[command(
    name = "lco-lab",
    version,
    about = "Verify, train and plot logit-space policy objectives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the property suites and print a pass/fail report.
    Verify {
        /// Suite or suite group to run (e.g. `hessian`, `gradient`).
        #[arg(long)]
        suite: Option<String>,
        /// Swap in a deliberately broken implementation.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train one model and write `dynamics.csv` and `model.txt`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the same experiment under two objectives and compare them.
    Dynamics {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact gradient descent against the geometric convergence bound.
    Converge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render CSV columns as an SVG line chart.
    Plot {
        #[arg(long = "csv", required = true)]
        csvs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Column on the horizontal axis.
        #[arg(long, default_value = "step")]
        x: String,
        /// Columns to draw; repeatable.
        #[arg(long = "column", default_values_t = vec!["grad_norm_param".to_string()])]
        columns: Vec<String>,
    },
}

fn verify(suite: Option<String>, fault: Option<String>) -> Result<ExitCode> {
    let impls = match fault.as_deref() {
        None => GradientImpls::default(),
        Some(name) => {
            GradientImpls::with_fault(name).ok_or_else(|| anyhow!("unknown fault `{name}`"))?
        }
    };
    if let Some(name) = &suite {
        let known = suite_names();
        let groups: Vec<&str> = known
            .iter()
            .map(|n| n.split('-').next().unwrap_or(n))
            .collect();
        if !known.contains(&name.as_str()) && !groups.contains(&name.as_str()) {
            eprintln!("error: unknown suite `{name}`; known: {}", known.join(", "));
            return Ok(ExitCode::from(2));
        }
    }
    let reports = run_suites(suite.as_deref(), &impls);
    print!("{}", format_report(&reports));
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!(
        "{} of {} suites passed",
        reports.len() - failed,
        reports.len()
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn run(cli: Cli) -> std::result::Result<ExitCode, CommandError> {
    match cli.command {
        Command::Verify { .. } => unreachable!("handled separately"),
        Command::Train { config, out } => {
            let records = commands::train(&config, &out)?;
            println!(
                "wrote {} steps to {}",
                records.len(),
                out.join("dynamics.csv").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Dynamics { config, out } => {
            let runs = commands::dynamics(&config, &out)?;
            println!("{}", lco_lab::dynamics::SUMMARY_HEADER.join(","));
            for (s, _) in &runs {
                println!("{}", s.csv_row());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Converge { config, out } => {
            let report = commands::converge(&config, &out)?;
            let bad = report.bound_violations();
            let mono = report.monotonicity_violations();
            println!(
                "rho = {:.6}; {} steps; {} bound violations; {} monotonicity violations",
                report.rho,
                report.rows.len().saturating_sub(1),
                bad.len(),
                mono.len()
            );
            if let Some(k) = bad.first() {
                let r = &report.rows[*k];
                println!(
                    "first violation at k = {k}: loss {:e} > bound {:e}",
                    r.loss, r.bound
                );
            }
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Plot {
            csvs,
            out,
            x,
            columns,
        } => {
            commands::plot(&csvs, &x, &columns, &out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Verify {
        suite,
        inject_fault,
    } = cli.command
    {
        return match verify(suite, inject_fault) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        };
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
