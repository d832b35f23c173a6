use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lap_cli::{cmd_evaluate, cmd_generate, cmd_interpret, cmd_train, Config};

#[derive(Parser)]
#[command(
    name = "lap",
    about = "Local attention pooling toolkit: synthetic data, training, interpretation, evaluation"
)]
struct Cli {
    /// Pipeline configuration file (TOML). Omit to use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (command-specific default otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the configured data directory.
    Generate,
    /// Train per the configured stages and write the best checkpoint.
    Train {
        /// Continue from an existing checkpoint (plug-in workflow).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export per-layer and integrated concept maps for the test split.
    Interpret {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Additionally render PNG heatmaps.
        #[arg(long)]
        png: bool,
    },
    /// Compute the metrics report for a checkpoint (or external maps).
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of external score maps (val/ and test/ subdirs of
        /// `<id>.integrated.lapm` files) to evaluate instead of the model's
        /// own interpretation stacks.
        #[arg(long)]
        maps: Option<PathBuf>,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if cli.device != "cpu" {
        anyhow::bail!("unsupported device '{}'; only cpu is available", cli.device);
    }
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    match cli.command {
        Command::Generate => {
            let dir = cmd_generate(&cfg, cli.out.as_deref())?;
            println!("dataset written to {}", dir.display());
        }
        Command::Train { checkpoint } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("run"));
            let (ckpt, report) = cmd_train(&cfg, &out, checkpoint.as_deref())?;
            println!(
                "checkpoint {} (best val balanced accuracy {:.4})",
                ckpt.display(),
                report.best_val_balanced_accuracy
            );
        }
        Command::Interpret { checkpoint, png } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("run"));
            let dir = cmd_interpret(&cfg, &checkpoint, &out, png)?;
            println!("maps written to {}", dir.display());
        }
        Command::Evaluate { checkpoint, maps } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("run"));
            let report = cmd_evaluate(&cfg, &checkpoint, maps.as_deref(), &out)?;
            print!("{}", report.to_text());
            println!("report written to {}", out.join("metrics.txt").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
