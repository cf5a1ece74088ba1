use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lsfm_cli::{exit_code, parse_settings, Command, RunConfig};

/// Latent spatial factor model: simulate, fit and diagnose site-level data
/// with informatively missing teeth.
#[derive(Parser)]
#[command(name = "lsfm", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate a dataset from one of the simulation designs.
    Simulate(Common),
    /// Fit a model variant to a dataset directory.
    Fit(Common),
    /// Influence weights and DIC for a previous fit.
    Diagnose(Common),
    /// Run the simulation study and write the metrics table.
    SimStudy(Common),
}

#[derive(Args)]
struct Common {
    /// Config file of key=value lines (a previous manifest works).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (same as threads=N).
    #[arg(long)]
    threads: Option<usize>,
    /// 100 replicates of 20000 iterations (sim-study only).
    #[arg(long)]
    paper_scale: bool,
    /// Suppress progress messages.
    #[arg(short, long)]
    quiet: bool,
    /// Settings as key=value.
    settings: Vec<String>,
}

fn run(command: Command, args: Common) -> lsfm::Result<()> {
    let text = args.config.as_ref().map(std::fs::read_to_string).transpose()?;
    let mut settings = parse_settings(&args.settings)?;
    if let Some(t) = args.threads {
        settings.push(("threads".into(), t.to_string()));
    }
    if args.paper_scale {
        settings.push(("study.paper_scale".into(), "true".into()));
    }
    if args.quiet {
        settings.push(("verbosity".into(), "0".into()));
    }
    let cfg = RunConfig::resolve(command, text.as_deref(), &settings)?;
    lsfm_cli::execute(&cfg)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Fit(a) => (Command::Fit, a),
        Sub::Diagnose(a) => (Command::Diagnose, a),
        Sub::SimStudy(a) => (Command::SimStudy, a),
    };
    match run(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lsfm {command}: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
