use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use intentkg_cli::{run_stage, Config, Outcome, Overrides, Stage};

/// Builds a purchase-intention knowledge graph one stage at a time.
#[derive(Debug, Parser)]
#[command(name = "forge", version)]
struct Args {
    stage: Stage,

    #[arg(long, short)]
    config: PathBuf,

    #[arg(long)]
    seed: Option<u64>,

    /// Plausibility threshold for population and assembly.
    #[arg(long)]
    threshold: Option<f64>,

    #[arg(long)]
    min_support: Option<usize>,

    /// Run even when the stage manifest is current.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let overrides = Overrides {
        seed: args.seed,
        threshold: args.threshold,
        min_support: args.min_support,
    };
    let result = Config::load(&args.config, &overrides).and_then(|cfg| run_stage(args.stage, &cfg, args.force));
    match result {
        Ok(Outcome::UpToDate) => {
            eprintln!("{}: up to date, skipped", args.stage.name());
            ExitCode::SUCCESS
        }
        Ok(Outcome::Ran { outputs }) => {
            for p in outputs {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("forge {}: {err}", args.stage.name());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
