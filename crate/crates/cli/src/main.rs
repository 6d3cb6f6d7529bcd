use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use iia_cli::commands::{self, Overrides};
use std::path::PathBuf;
use std::process::ExitCode;

/// Calibrated diffusion ODE samplers: calibration, sampling, and metric
/// campaigns against analytic mixture models.
#[derive(Parser)]
#[command(name = "iia", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand: the config file plus targeted
/// overrides of its fields.
#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Calibration seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Variant id, e.g. `iia_edm` (overrides the config).
    #[arg(long)]
    variant: Option<String>,
    /// Evaluation budgets, comma separated (overrides the config).
    #[arg(long, value_delimiter = ',')]
    nfe: Option<Vec<usize>>,
    /// Fine-grained refinement count (overrides the variant default).
    #[arg(long)]
    m: Option<usize>,
    /// History depth (overrides the variant default).
    #[arg(long)]
    r: Option<usize>,
    /// Calibration batch size (overrides the variant default).
    #[arg(long)]
    batch: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            variant: self.variant.clone(),
            nfe: self.nfe.clone(),
            m: self.m,
            r: self.r,
            batch: self.batch,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit per-step coefficient tables for the configured variant.
    Calibrate(Common),
    /// Write terminal samples for the first configured budget.
    Sample(Common),
    /// Write per-step residual curves (baseline vs calibrated).
    Residuals(Common),
    /// Terminal-error and distribution-distance sweep over budgets.
    Sweep(Common),
    /// Write per-step coefficient curves in reporting form.
    DumpCoeffs(Common),
    /// Run the quick invariant suite against the configured model.
    Check(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate(c) => {
            for path in commands::cmd_calibrate(&c.config, &c.overrides())? {
                println!("wrote {}", path.display());
            }
        }
        Command::Sample(c) => {
            println!("wrote {}", commands::cmd_sample(&c.config, &c.overrides())?.display());
        }
        Command::Residuals(c) => {
            println!("wrote {}", commands::cmd_residuals(&c.config, &c.overrides())?.display());
        }
        Command::Sweep(c) => {
            println!("wrote {}", commands::cmd_sweep(&c.config, &c.overrides())?.display());
        }
        Command::DumpCoeffs(c) => {
            println!("wrote {}", commands::cmd_dump_coeffs(&c.config, &c.overrides())?.display());
        }
        Command::Check(c) => {
            commands::cmd_check(&c.config, &c.overrides())?;
            println!("all checks passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
