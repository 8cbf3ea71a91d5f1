use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cqb_cli::train::train_head_to;
use cqb_cli::{compare_policies, emit_plot, run_experiment, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "cqb", version, about = "Contextual queueing bandit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured policy over all seeds and write CSVs and a manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of runs.
        #[arg(long)]
        runs: Option<usize>,
        /// Output directory; falls back to CQB_OUT_DIR, then the config's out_dir.
        #[arg(long, env = "CQB_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Plot an aggregate or comparison CSV as a two-panel SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a projection head on offline tabular items.
    TrainHead {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured policies and write compare.csv with all aggregates.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "CQB_OUT_DIR")]
        out: Option<PathBuf>,
    },
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, CliError> {
    let config = ExperimentConfig::load(path)?;
    for w in config.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(config)
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, seed, runs, out } => {
            let mut config = load(&config)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            if let Some(r) = runs {
                config.runs = r;
            }
            config.validate()?;
            let out = out.unwrap_or_else(|| config.out_dir.clone());
            let (results, manifest) = run_experiment(&config, &out)?;
            for p in &results.policies {
                println!(
                    "{:<14} final cum regret {:>10.4}  final queue regret {:>8.3}",
                    p.kind.as_str(),
                    p.aggregate.final_mean_cum_regret().unwrap_or(f64::NAN),
                    p.aggregate.final_mean_qregret().unwrap_or(f64::NAN)
                );
            }
            println!("wrote {} files to {}", manifest.outputs.len(), out.display());
        }
        Command::Plot { input, out } => {
            emit_plot(&input, &out)?;
            println!("wrote {}", out.display());
        }
        Command::TrainHead { config, out } => {
            let config = load(&config)?;
            let trained = train_head_to(&config, &out)?;
            let first = trained.report.losses.first().copied().unwrap_or(f64::NAN);
            let last = trained.report.losses.last().copied().unwrap_or(f64::NAN);
            if !trained.short_groups.is_empty() {
                eprintln!("warning: servers {:?} had fewer items than requested", trained.short_groups);
            }
            println!(
                "trained on {} items ({} anchors): loss {first:.4} -> {last:.4}; wrote {}",
                trained.items,
                trained.report.anchors,
                out.display()
            );
        }
        Command::Compare { config, out } => {
            let config = load(&config)?;
            let out = out.unwrap_or_else(|| config.out_dir.clone());
            let (results, path) = compare_policies(&config, &out)?;
            for p in &results.policies {
                println!(
                    "{:<14} final cum regret {:>10.4}  final queue regret {:>8.3}",
                    p.kind.as_str(),
                    p.aggregate.final_mean_cum_regret().unwrap_or(f64::NAN),
                    p.aggregate.final_mean_qregret().unwrap_or(f64::NAN)
                );
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
