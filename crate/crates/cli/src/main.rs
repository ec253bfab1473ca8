use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use meritluck::meritprob::AdvantageKind;
use meritluck_cli::config::{Overrides, RunConfig};
use meritluck_cli::{checks, commands};

#[derive(Parser)]
#[command(name = "meritluck", version, about = "Simulate and analyze redistribution under luck")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to one configured arm.
    #[arg(long)]
    arm: Option<String>,
    /// Disclose pi to every spectator.
    #[arg(long)]
    informed: bool,
    /// Count merit only when the winner's effort strictly exceeds the loser's.
    #[arg(long)]
    strict_merit: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Multiplicative,
    Additive,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the pi curve and check its shape.
    PiCurve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
    },
    /// Write per-spectator session designs.
    Design {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate spectator decisions for each arm.
    RunStudy {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the regression tables from decision datasets.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Dataset as NAME=PATH; repeatable. Defaults to the run-study outputs.
        #[arg(long = "input", value_name = "NAME=PATH")]
        inputs: Vec<String>,
    },
    /// Run every stage and write a manifest of outputs.
    Reproduce {
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in property checks.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

fn load(c: &Common) -> Result<(RunConfig, meritluck_cli::config::Provenance)> {
    let flags = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        arm: c.arm.clone(),
        informed: c.informed,
        strict_merit: c.strict_merit,
    };
    RunConfig::load(c.config.as_deref(), &flags)
}

fn parse_input(s: &str) -> Result<(String, PathBuf)> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => bail!("--input expects NAME=PATH, got `{s}`"),
    }
}

#[cfg(feature = "parallel")]
fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MERITLUCK_THREADS") {
        use anyhow::Context;
        let n: usize = v.parse().with_context(|| format!("MERITLUCK_THREADS={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn init_threads() -> Result<()> {
    Ok(())
}

fn report(files: Vec<PathBuf>, root: &std::path::Path) {
    for f in files {
        println!("{}", root.join(f).display());
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    match cli.command {
        Command::PiCurve { common, kind } => {
            let (mut cfg, _) = load(&common)?;
            if let Some(k) = kind {
                cfg.advantage_kind = match k {
                    Kind::Multiplicative => AdvantageKind::Multiplicative,
                    Kind::Additive => AdvantageKind::Additive,
                };
            }
            report(commands::cmd_pi_curve(&cfg)?, &cfg.out);
        }
        Command::Design { common } => {
            let (cfg, _) = load(&common)?;
            report(commands::cmd_design(&cfg)?, &cfg.out);
        }
        Command::RunStudy { common } => {
            let (cfg, _) = load(&common)?;
            report(commands::cmd_run_study(&cfg)?, &cfg.out);
        }
        Command::Analyze { common, inputs } => {
            let (cfg, _) = load(&common)?;
            let inputs = inputs.iter().map(|s| parse_input(s)).collect::<Result<Vec<_>>>()?;
            report(commands::cmd_analyze(&cfg, &inputs)?, &cfg.out);
        }
        Command::Reproduce { common } => {
            let (cfg, prov) = load(&common)?;
            report(commands::cmd_reproduce(&cfg, &prov)?, &cfg.out);
        }
        Command::Validate { common } => {
            let (cfg, _) = load(&common)?;
            if checks::run_all(&cfg) > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
