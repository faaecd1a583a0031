use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use xdistill::adapt::Objectives;
use xdistill::encoder::{count_parameters, EncoderConfig};
use xdistill_cli::config::{read_json, Overrides, Phase, RunConfig};
use xdistill_cli::{exit_code, phases};

#[derive(Parser, Debug)]
#[command(name = "xdistill", version, about = "Cross-modal adaptation pipeline")]
struct Cli {
    phase: Phase,
    /// Run configuration, or an encoder preset for count-params.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of mlm, match, cliptc.
    #[arg(long)]
    objectives: Option<Objectives>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "out")]
    out_dir: Option<PathBuf>,
    /// Input checkpoint instead of the phase's default.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn count_params(path: &Path) -> anyhow::Result<bool> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("hidden_dim").is_none() {
        return Ok(false);
    }
    let config: EncoderConfig = serde_json::from_value(value)
        .map_err(|e| xdistill_cli::config::ConfigError(format!("{}: {e}", path.display())))?;
    config.validate()?;
    println!("{}", count_parameters(&config));
    Ok(true)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.phase == Phase::CountParams && count_params(&cli.config)? {
        return Ok(());
    }
    let overrides = Overrides {
        seed: cli.seed,
        objectives: cli.objectives,
        epochs: cli.epochs,
        out_dir: cli.out_dir,
        checkpoint: cli.checkpoint,
    };
    let cfg = RunConfig::load(&cli.config, cli.phase, &overrides)?;
    phases::run(&cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
