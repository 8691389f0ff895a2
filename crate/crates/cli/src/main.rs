//! `flowgmm` command-line driver. Every subcommand takes a `--config` file;
//! `--seed` and `--out` override the run seed and output root. Exit codes:
//! 0 success, 1 usage/config errors, 2 numerical failures.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use flowgmm_cli::run::{self, CliResult};

#[derive(Parser)]
#[command(
    name = "flowgmm",
    version,
    about = "Semi-supervised classification with a normalizing flow over a latent Gaussian mixture"
)]
struct Cli {
    /// Output root directory (default: $FLOWGMM_OUT, then ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and write it as CSV.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Destination CSV file.
        #[arg(long)]
        file: PathBuf,
    },
    /// Train the configured method and write the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a trained checkpoint on a data split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Refit the mixture variance on the validation split and report
    /// before/after quality.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw class-conditional samples through the inverse flow.
    Sample {
        #[arg(long)]
        config: PathBuf,
        /// Class index to sample from.
        #[arg(long)]
        class: usize,
        /// Number of samples.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Latent variance multiplier; 0 maps the component mean exactly.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Latent-space interpolation between two test rows.
    Interpolate {
        #[arg(long)]
        config: PathBuf,
        /// Index into the test split for the start point.
        #[arg(long, default_value_t = 0)]
        a: usize,
        /// Index into the test split for the end point.
        #[arg(long, default_value_t = 1)]
        b: usize,
        /// Number of points along the path (endpoints included).
        #[arg(long, default_value_t = 9)]
        steps: usize,
    },
    /// Latent distances to the nearest decision boundary.
    Distances {
        #[arg(long)]
        config: PathBuf,
        /// Split to score: train, val, or test.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Log-likelihood scores for out-of-distribution screening.
    Ood {
        #[arg(long)]
        config: PathBuf,
        /// External CSV of feature rows; defaults to the test split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predictive probabilities on a regular 2-D grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// Grid points per axis.
        #[arg(long, default_value_t = 80)]
        resolution: usize,
        /// Margin added around the data bounding box.
        #[arg(long, default_value_t = 0.5)]
        pad: f64,
    },
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let root = run::out_root(cli.out.as_deref());
    let (config_path, seed) = match &cli.cmd {
        Cmd::Gen { config, .. }
        | Cmd::Train { config }
        | Cmd::Eval { config, .. }
        | Cmd::Calibrate { config }
        | Cmd::Sample { config, .. }
        | Cmd::Interpolate { config, .. }
        | Cmd::Distances { config, .. }
        | Cmd::Ood { config, .. }
        | Cmd::Grid { config, .. } => (config.clone(), cli.seed),
    };
    let cfg = run::load_config(&config_path, seed)?;
    match cli.cmd {
        Cmd::Gen { file, .. } => run::cmd_gen(&cfg, &file),
        Cmd::Train { .. } => run::cmd_train(&cfg, &root).map(|_| ()),
        Cmd::Eval { split, .. } => run::cmd_eval(&cfg, &root, &split),
        Cmd::Calibrate { .. } => run::cmd_calibrate(&cfg, &root),
        Cmd::Sample {
            class,
            n,
            temperature,
            ..
        } => run::cmd_sample(&cfg, &root, class, n, temperature),
        Cmd::Interpolate { a, b, steps, .. } => run::cmd_interpolate(&cfg, &root, a, b, steps),
        Cmd::Distances { split, .. } => run::cmd_distances(&cfg, &root, &split),
        Cmd::Ood { data, .. } => run::cmd_ood(&cfg, &root, data.as_deref()),
        Cmd::Grid {
            resolution, pad, ..
        } => run::cmd_grid(&cfg, &root, resolution, pad),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
