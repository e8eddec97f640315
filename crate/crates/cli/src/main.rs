//! `instantft` command-line driver.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 missing or
//! malformed data, 4 failed acceptance check.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{ExperimentConfig, Overrides};

#[derive(Parser, Debug)]
#[command(
    name = "instantft",
    version,
    about = "Pretraining, fine-tuning, benchmarks and cost tables"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML key/value experiment file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = every core). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for CSV artifacts and checkpoints.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set method=lora-all --set theta=60`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train the backbone on the full training split and write a checkpoint.
    Pretrain,
    /// Fine-tune on rotated subsets over every configured seed.
    Finetune,
    /// Time InstantFT (cache off, fp32, nf4), LoRA-All, FT-Last and inference.
    Bench,
    /// Emit the parameter, FLOP and memory table.
    Costs,
    /// Fill fp32 and nf4 caches and report their footprint.
    CacheStats,
}

/// Failures with a dedicated exit code.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0:#}")]
    Data(anyhow::Error),
    #[error("check failed: {0}")]
    Check(String),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<Failure>() {
        return match f {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Check(_) => 4,
        };
    }
    let config_error = err.chain().any(|e| {
        e.is::<toml::de::Error>()
            || matches!(
                e.downcast_ref::<instantft::Error>(),
                Some(instantft::Error::Config(_))
            )
    });
    if config_error {
        2
    } else {
        1
    }
}

fn configure(cli: &Cli) -> anyhow::Result<config::Resolved> {
    let overrides = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        out: cli.out.clone(),
        set: cli.set.clone(),
    };
    ExperimentConfig::load(cli.config.as_deref())
        .and_then(|c| c.apply(&overrides))
        .and_then(ExperimentConfig::resolve)
        .map_err(|e| Failure::Config(format!("{e:#}")).into())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = configure(cli)?;
    match cli.command {
        Command::Pretrain => commands::cmd_pretrain(&cfg),
        Command::Finetune => commands::cmd_finetune(&cfg),
        Command::Bench => commands::cmd_bench(&cfg),
        Command::Costs => commands::cmd_costs(&cfg),
        Command::CacheStats => commands::cmd_cache_stats(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failures_map_to_exit_codes() {
        assert_eq!(exit_code(&Failure::Config("x".into()).into()), 2);
        assert_eq!(exit_code(&Failure::Data(anyhow::anyhow!("x")).into()), 3);
        assert_eq!(exit_code(&Failure::Check("x".into()).into()), 4);
        assert_eq!(exit_code(&anyhow::anyhow!("x")), 1);
        let lib: anyhow::Error = instantft::Error::Config("bad".into()).into();
        assert_eq!(exit_code(&lib.context("while running")), 2);
    }

    #[test]
    fn cli_parses_global_flags() {
        let cli = Cli::try_parse_from([
            "instantft",
            "finetune",
            "--seed",
            "3",
            "--threads",
            "2",
            "--set",
            "theta=60",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(3));
        assert_eq!(cli.threads, Some(2));
        assert_eq!(cli.set, vec!["theta=60"]);
    }
}
