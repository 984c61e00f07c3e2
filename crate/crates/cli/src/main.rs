use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use nearl_cli::{error_category, exit_code, run, Command, Manifest, RunConfig};
use nearl_core::analysis::Suite;
use nearl_core::data::SplitName;

#[derive(Parser)]
#[command(name = "nearl", version, about = "Cross-modal adapter training and analysis on a frozen two-tower model")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset file.
    GenData,
    /// Train adapters; writes metrics, checkpoint and summary.
    Train,
    /// Evaluate a checkpoint (or the freshly initialized model) on one split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
    /// Run an ablation suite: modules, depth, rank, layer_groups or all.
    Ablate {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Audit trainable-parameter counts.
    Params,
    /// Cosine statistics and PCA of adapted versus frozen image features.
    Analyze {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Repeat the command recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

fn execute(cli: Cli) -> Result<String> {
    let (command, mut config) = if let Cmd::Rerun { manifest } = &cli.command {
        let m = Manifest::load(manifest)?;
        (m.command()?, m.config)
    } else {
        let config = match &cli.config {
            Some(path) => {
                let base = absolute(path)?.parent().map(Path::to_path_buf).unwrap_or_default();
                RunConfig::load(path)?.resolve(&base)?
            }
            None => RunConfig::default().resolve(&std::env::current_dir()?)?,
        };
        let command = match cli.command {
            Cmd::GenData => Command::GenData,
            Cmd::Train => Command::Train,
            Cmd::Eval { checkpoint, split } => Command::Eval { checkpoint: checkpoint.as_deref().map(absolute).transpose()?, split },
            Cmd::Ablate { suite } => Command::Ablate {
                suite: if suite == "all" { None } else { Some(suite.parse::<Suite>()?) },
            },
            Cmd::Params => Command::Params,
            Cmd::Analyze { checkpoint } => Command::Analyze { checkpoint: checkpoint.as_deref().map(absolute).transpose()? },
            Cmd::Rerun { .. } => unreachable!(),
        };
        (command, config)
    };
    if let Some(dir) = &cli.output_dir {
        config.output_dir = absolute(dir)?;
    }
    let outcome = run(&command, &config)?;
    Ok(outcome.summary)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let category = error_category(&err);
            let message = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{category}]: {message}");
            ExitCode::from(exit_code(category) as u8)
        }
    }
}
