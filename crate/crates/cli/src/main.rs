use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};
use mfg_noise_lab_cli::config::ExperimentConfig;
use mfg_noise_lab_cli::pipeline::{self, Source};
use mfg_noise_lab_cli::presets::{preset, PRESETS};
use mfg_noise_lab_cli::validate::validate;

#[derive(Parser)]
#[command(name = "mfg-noise-lab", version, about = "Mean field games with multiplicative noise: experiments and audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset or a JSON config and write CSV/JSON artifacts.
    Run(RunArgs),
    /// Check the standing assumptions for a JSON config.
    Validate {
        config: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Print a preset as a JSON config.
    Show { preset: String },
    /// List the preset names.
    Presets,
}

#[derive(Args)]
struct RunArgs {
    /// Preset name (same as --preset).
    #[arg(conflicts_with_all = ["preset", "config"])]
    name: Option<String>,
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to out/<preset or config stem>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    quiet: bool,
}

fn lookup(name: &str) -> Result<ExperimentConfig> {
    preset(name).ok_or_else(|| anyhow!("unknown preset `{name}`; expected one of: {}", PRESETS.join(", ")))
}

fn run(args: RunArgs) -> Result<bool> {
    let (mut cfg, source, stem) = match (args.name.or(args.preset), &args.config) {
        (Some(name), None) => (lookup(&name)?, Source::Preset(name.clone()), name),
        (None, Some(path)) => {
            let stem = path.file_stem().map_or("config".into(), |s| s.to_string_lossy().into_owned());
            (ExperimentConfig::load(path)?, Source::Config(path.display().to_string()), stem)
        }
        _ => bail!("give a preset name, --preset or --config"),
    };
    if let Some(seed) = args.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(n) = args.replications {
        cfg.simulation.replications = n;
    }
    if let Some(dt) = args.dt {
        cfg.simulation.dt = dt;
    }
    if let Some(t) = args.horizon {
        cfg.simulation.horizon = t;
    }
    let out = args.out.unwrap_or_else(|| PathBuf::from("out").join(stem));
    let outcome = pipeline::run(&cfg, &source, &out)?;
    if !args.quiet {
        for a in &outcome.audits {
            println!("{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
        }
        println!("wrote {} files to {}", outcome.files.len(), out.display());
    }
    Ok(outcome.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Validate { config, quiet } => ExperimentConfig::load(&config)
            .map_err(anyhow::Error::from)
            .and_then(|cfg| Ok(validate(&cfg)?))
            .map(|checks| {
                if !quiet {
                    for c in &checks {
                        println!("{c}");
                    }
                }
                !checks.iter().any(|c| c.blocking_failure())
            }),
        Command::Show { preset } => lookup(&preset).and_then(|cfg| {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(true)
        }),
        Command::Presets => {
            for p in PRESETS {
                println!("{p}");
            }
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
