use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tvpr_core::commands;
use tvpr_core::dataset::SplitName;

/// Text-to-video person retrieval: data generation, training, evaluation,
/// ablation and retrieval.
#[derive(Parser)]
#[command(name = "tvpr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus and its manifest
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split of a manifest and write a checkpoint
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a component ablation grid
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Rank the clips of a manifest against a text query
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        topk: usize,
    },
}

fn run(cli: Cli) -> tvpr_core::Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let manifest = commands::gen_data(&config, &out)?;
            println!("wrote {}", manifest.display());
        }
        Command::Train { config, manifest, out } => {
            commands::train_command(&config, &manifest, &out, &mut std::io::stderr())?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            ckpt,
            manifest,
            split,
            report,
        } => {
            let record = commands::eval_command(&ckpt, &manifest, split)?;
            commands::write_eval_report(&report, &record)?;
            print!("{}", record.to_table());
        }
        Command::Ablate { grid, report } => {
            let result = commands::ablate_command(&grid, &mut std::io::stderr())?;
            commands::write_ablation_report(&report, &result)?;
            print!("{}", result.to_table());
        }
        Command::Retrieve {
            ckpt,
            manifest,
            query,
            topk,
        } => {
            let hits = commands::retrieve_command(&ckpt, &manifest, &query, topk)?;
            for (i, h) in hits.iter().enumerate() {
                println!("{:>3}  {:.4}  {}  {}", i + 1, h.score, h.clip_id, h.caption);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
