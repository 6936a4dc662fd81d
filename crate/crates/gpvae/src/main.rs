use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gpvae::commands;
use gpvae::config::RunConfig;

#[derive(Parser)]
#[command(name = "gpvae", version, about = "Train and evaluate GP-amortized VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and the run log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the saved training state if there is one.
        #[arg(long)]
        resume: bool,
    },
    /// IWAE table on the test set.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Amortization gap against long per-instance SVI.
    Gap {
        #[arg(long)]
        config: PathBuf,
    },
    /// Uncertainty gauge against true-posterior non-Gaussianity (2-D latents).
    Uncertainty {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-batch inference timing.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let s = commands::run_train(&RunConfig::load(&config)?, resume)?;
            match (s.best_epoch, s.best_val_elbo) {
                (Some(e), Some(v)) => println!("trained {} epochs; best validation ELBO {v:.4} at epoch {e}", s.epochs),
                _ => println!("trained {} epochs", s.epochs),
            }
        }
        Command::Eval { config } => {
            for (k, m, se) in commands::run_eval(&RunConfig::load(&config)?)?.iwae {
                println!("K={k}\t{m:.4}\t± {se:.4}");
            }
        }
        Command::Gap { config } => {
            let s = commands::run_gap(&RunConfig::load(&config)?)?;
            println!("mean gap {:.4} ± {:.4} ({} aborted SVI runs)", s.mean, s.se, s.aborted);
        }
        Command::Uncertainty { config } => {
            let s = commands::run_uncertainty(&RunConfig::load(&config)?)?;
            match s.spearman {
                Some(r) => println!("Spearman {r:.4} over {} instances", s.instances),
                None => println!("Spearman undefined (constant input) over {} instances", s.instances),
            }
        }
        Command::Bench { config } => {
            for r in commands::run_bench(&RunConfig::load(&config)?)? {
                println!("{}\tk={}\t{:.3} ms", r.method, r.k, r.mean_ms);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
