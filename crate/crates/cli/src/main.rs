use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stvfr_cli::commands::{cmd_complexity, cmd_eval, cmd_generate, cmd_gradcheck, cmd_report, cmd_train};
use stvfr_cli::config::{RunConfig, WORKDIR_ENV};
use stvfr_cli::exit_code;
use stvfr_core::Result;

/// Still-to-video face recognition on synthetic data.
///
/// Configuration is resolved as defaults < --config file < STV_WORKDIR <
/// --set overrides < dedicated flags, and echoed by every command.
#[derive(Parser, Debug)]
#[command(name = "stvfr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.05` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Sets model.arch (ccm, tbe, haarnet, cfr).
    #[arg(long, global = true)]
    arch: Option<String>,
    /// Sets train.epochs (every stage).
    #[arg(long, global = true)]
    epochs: Option<String>,
    /// Sets train.seed.
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Sets run.threads.
    #[arg(long, global = true)]
    threads: Option<String>,
    /// Sets paths.workdir.
    #[arg(long, global = true)]
    workdir: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write the synthetic dataset to <workdir>/data.
    Generate,
    /// Train model.arch and write its checkpoint(s) and run report.
    Train,
    /// Rank-1 evaluation of the trained model.arch.
    Eval,
    /// Finite-difference check of every loss and layer.
    Gradcheck,
    /// Operations, parameters and layers of model.arch.
    Complexity,
    /// Table 1 comparison over every system.
    Report,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.merge_text(&std::fs::read_to_string(path)?)?;
    }
    if let Ok(dir) = std::env::var(WORKDIR_ENV) {
        cfg.set("paths.workdir", &dir)?;
    }
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    let flags = [
        ("model.arch", &cli.arch),
        ("train.epochs", &cli.epochs),
        ("train.seed", &cli.seed),
        ("run.threads", &cli.threads),
        ("paths.workdir", &cli.workdir),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String> {
    let cfg = resolve(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads()?)
        .build()
        .map_err(|e| stvfr_core::Error::config("run.threads", e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval => cmd_eval(&cfg).map(|r| r.0),
        Command::Gradcheck => cmd_gradcheck(&cfg),
        Command::Complexity => cmd_complexity(&cfg).map(|r| r.0),
        Command::Report => cmd_report(&cfg),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
