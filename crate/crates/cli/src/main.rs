//! `condit` command-line harness.
//!
//! Exit codes: 0 success, 1 run failure, 2 usage error, 3 invalid config.

mod commands;
mod config;
mod output;

use clap::{Parser, Subcommand};
use commands::Failure;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "condit",
    version,
    about = "Desk-scale conditional diffusion transformer laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment config; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train a DiT on a family and report its loss trace and risk.
    Train,
    /// Monte-Carlo score risk of the oracle, zero or a checkpoint.
    Risk,
    /// Local-polynomial score error as the grid is refined.
    ApproxSweep,
    /// Build the explicit universal approximator and tabulate its error.
    UatDemo,
    /// Evaluate the log-covering-number bound.
    Cover,
    /// TV distance between backward samples and direct samples.
    Tv,
    /// d_x or t0 trend sweep.
    Trend,
    /// Backward sampler with optional guidance.
    Sample,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Risk => "risk",
            Command::ApproxSweep => "approx-sweep",
            Command::UatDemo => "uat-demo",
            Command::Cover => "cover",
            Command::Tv => "tv",
            Command::Trend => "trend",
            Command::Sample => "sample",
        }
    }
}

fn run(cli: &Cli) -> Result<String, Failure> {
    let (text, bytes) = match &cli.config {
        Some(p) => {
            let bytes =
                std::fs::read(p).map_err(|e| Failure::Run(format!("{}: {e}", p.display())))?;
            let text = String::from_utf8(bytes.clone())
                .map_err(|_| Failure::Run(format!("{}: not UTF-8", p.display())))?;
            (text, bytes)
        }
        None => (String::new(), Vec::new()),
    };
    let cfg = config::parse(&text)?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(Failure::Config(config::ConfigError {
            location: "flag `--workers`".into(),
            message: "must be >= 1".into(),
        }));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| Failure::Run(e.to_string()))?;
    let mut out = output::Artifacts::new(&cli.out_dir)?;
    let summary = match cli.command {
        Command::Train => commands::train_cmd(&cfg, seed, &mut out),
        Command::Risk => commands::risk_cmd(&cfg, seed, &mut out),
        Command::ApproxSweep => commands::approx_cmd(&cfg, &mut out),
        Command::UatDemo => commands::uat_cmd(&cfg, &mut out),
        Command::Cover => commands::cover_cmd(&cfg, &mut out),
        Command::Tv => commands::tv_cmd(&cfg, seed, &mut out),
        Command::Trend => commands::trend_cmd(&cfg, seed, &mut out),
        Command::Sample => commands::sample_cmd(&cfg, seed, &mut out),
    }?;
    let config_path = cli.config.clone().unwrap_or_default();
    out.finish(cli.command.name(), &config_path, &bytes, seed, workers)?;
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{}: {summary}", cli.command.name());
            ExitCode::SUCCESS
        }
        Err(Failure::Config(e)) => {
            let file = cli
                .config
                .as_ref()
                .map_or("config".to_string(), |p| p.display().to_string());
            eprintln!("error: invalid config {file}: {e}");
            ExitCode::from(3)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {}: {e}", cli.command.name());
            ExitCode::from(1)
        }
    }
}
