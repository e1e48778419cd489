mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "adreason", version, about = "Reasoning-based anomaly detection data and evaluation toolkit")]
struct Cli {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the reference retrieval index from normal-image feature files.
    BuildIndex {
        #[arg(long)]
        features: PathBuf,
        /// Restrict the pool to this manifest's normal samples.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attach the most aligned normal reference to every sample.
    AssignRefs {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate reasoning texts through a chat-completions endpoint.
    GenTexts {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        parallel: Option<usize>,
        /// Directory image paths are relative to (defaults to the manifest's).
        #[arg(long)]
        images_root: Option<PathBuf>,
        #[arg(long)]
        red_box_filter: bool,
    },
    /// Accept or reject generated texts against ground truth.
    Verify {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_accepted: PathBuf,
        #[arg(long)]
        out_rejected: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Use remote embeddings for label similarity.
        #[arg(long)]
        embedding_endpoint: Option<String>,
    },
    /// Per-sample reward breakdown for a responses file.
    Reward {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Objective, advantage and zero-advantage statistics for rollouts.
    GrpoCheck {
        #[arg(long)]
        rollouts: PathBuf,
        /// Summary file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detection and localization metrics for a responses file.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        loc_iou: Option<f64>,
        #[arg(long)]
        report: PathBuf,
        /// Per-sample records.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Count an image as localized when any region matches.
        #[arg(long)]
        any_region: bool,
    },
    /// Corpus statistics per subdataset.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_logging(cli.verbose);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

pub(crate) type CliResult = Result<(), CliError>;
