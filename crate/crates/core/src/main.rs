use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use gradalign::harness::{run_command, Command, ExperimentConfig, RunOptions};
use gradalign::Error;

#[derive(Clone, Copy, ValueEnum)]
enum Cmd {
    Fewshot,
    Base2new,
    Domainshift,
    LambdaSweep,
    Angles,
    Gradcheck,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Fewshot => Command::Fewshot,
            Cmd::Base2new => Command::Base2new,
            Cmd::Domainshift => Command::Domainshift,
            Cmd::LambdaSweep => Command::LambdaSweep,
            Cmd::Angles => Command::Angles,
            Cmd::Gradcheck => Command::Gradcheck,
        }
    }
}

/// Run a gradient-surgery experiment protocol and write CSV/JSON results.
#[derive(Parser)]
#[command(name = "gradalign", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replace the seed list with N seeds derived from the master seed.
    #[arg(long, value_name = "N")]
    seeds: Option<usize>,
    /// Also write SVG charts where the command has one.
    #[arg(long)]
    plot: bool,
    #[arg(long, value_name = "N", default_value_t = 1)]
    threads: usize,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(text) = std::env::var("GRADALIGN_SEED") {
        cfg.master_seed = text
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("GRADALIGN_SEED is not an unsigned integer: {text:?}")))?;
    }
    if let Some(n) = cli.seeds {
        if n == 0 {
            return Err(Error::Config("--seeds must be >= 1".into()));
        }
        cfg = cfg.with_seed_count(n);
    }
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("gradalign: {e}");
            return ExitCode::from(2);
        }
    };
    let opts = RunOptions {
        out_dir: cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone()),
        threads: cli.threads,
        plot: cli.plot,
    };
    match run_command(cli.command.into(), &cfg, &opts) {
        Ok(report) => {
            for f in &report.files {
                println!("{}", f.display());
            }
            for msg in &report.failures {
                eprintln!("gradalign: {msg}");
            }
            if report.success() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(Error::Config(msg)) => {
            eprintln!("gradalign: configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("gradalign: {e}");
            ExitCode::from(1)
        }
    }
}
