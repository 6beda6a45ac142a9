use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vitleak::commands::{self, SweepKnob};
use vitleak::error::EXIT_CODES;
use vitleak::{ExperimentSpec, HarnessError, Result, RunReport};

fn exit_code_help() -> String {
    let mut s = String::from("Exit codes:\n");
    for (code, what) in EXIT_CODES {
        s.push_str(&format!("  {code}  {what}\n"));
    }
    s.push_str(&format!(
        "\nOutput directory: --out, else the spec's output_dir, else ${}, else ./{}.\n\
         On failure a JSON error record is printed to stderr.",
        commands::OUT_DIR_ENV,
        commands::DEFAULT_OUT_DIR
    ));
    s
}

#[derive(Parser)]
#[command(name = "vitleak", version, about = "Gradient-leakage experiments on miniature vision transformers")]
#[command(after_help = exit_code_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every primitive, the model and the matching losses.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the configured attack once per trial.
    Attack {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form reconstruction quality across noise scales or channel widths.
    DefenseSweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_parser = ["noise", "hidden-dim"])]
        knob: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attack with the position-embedding gradient excluded; writes loss and MSE curves.
    TwinData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attack with the named gradient groups excluded (pos-emb, patch-emb, cls, head, encoder-N).
    AblateParams {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        mask: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert between IDX and PGM/PPM.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn summarize(report: &RunReport, out: &Path) {
    let a = &report.aggregates;
    println!(
        "{} rows, mse {:.4e} +- {:.2e}, ssim {:.4} +- {:.2e}; written to {}",
        report.rows.len(),
        a.mse.mean,
        a.mse.std,
        a.ssim.mean,
        a.ssim.std,
        out.display()
    );
}

fn with_spec(path: &Path, out: Option<&Path>) -> Result<(ExperimentSpec, PathBuf)> {
    let spec = ExperimentSpec::load(path)?;
    let dir = commands::resolve_out_dir(out, &spec);
    Ok((spec, dir))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gradcheck { seed } => {
            let (_, text) = commands::gradcheck(seed)?;
            print!("{text}");
        }
        Command::Attack { spec, out } => {
            let (spec, dir) = with_spec(&spec, out.as_deref())?;
            summarize(&commands::attack(&spec, &dir)?, &dir);
        }
        Command::DefenseSweep { spec, knob, values, out } => {
            let (spec, dir) = with_spec(&spec, out.as_deref())?;
            let knob: SweepKnob = knob.parse()?;
            summarize(&commands::defense_sweep(&spec, knob, &values, &dir)?, &dir);
        }
        Command::TwinData { spec, out } => {
            let (spec, dir) = with_spec(&spec, out.as_deref())?;
            summarize(&commands::twin_data(&spec, &dir)?, &dir);
        }
        Command::AblateParams { spec, mask, out } => {
            let (spec, dir) = with_spec(&spec, out.as_deref())?;
            let groups: BTreeSet<String> = mask.into_iter().map(|s| s.trim().to_string()).collect();
            summarize(&commands::ablate_params(&spec, &groups, &dir)?, &dir);
        }
        Command::Convert { input, out } => {
            for p in commands::convert(&input, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &HarnessError) -> ExitCode {
    eprintln!("{}", e.record());
    ExitCode::from(e.exit_code() as u8)
}
