use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gradfisher::{parse_config, presets, ExperimentConfig, Overrides};

/// Run a fishing-attack experiment preset and write its CSV and JSON
/// outputs.
#[derive(Debug, Parser)]
#[command(name = "gradfisher", version)]
struct Cli {
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(presets::PRESETS))]
    preset: String,
    /// JSON config file; keys not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "GRADFISHER_THREADS")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file = match &cli.config {
        Some(path) => match parse_config(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
        None => ExperimentConfig::default(),
    };
    let config = Overrides {
        preset: Some(cli.preset.clone()),
        seed: cli.seed,
        out: cli.out,
    }
    .apply(file);

    let output = match presets::run_preset_with_threads(&cli.preset, &config, cli.threads) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = output.write(&config.out, &config) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    for c in &output.criteria {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if output.passed() {
        ExitCode::SUCCESS
    } else {
        for c in output.failed() {
            eprintln!("failed criterion: {}", c.name);
        }
        ExitCode::FAILURE
    }
}
