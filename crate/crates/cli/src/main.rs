//! `etchsim`: dataset generation, training, prediction, experiments, plots
//! and the HTTP service behind one command.

mod commands;
mod config;
mod plot;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clap::error::ErrorKind;
use etch_core::model::Variant;

#[derive(Debug, Parser)]
#[command(
    name = "etchsim",
    version,
    about = "Physics-constrained surrogate models for plasma-etch trench profiles",
    long_about = "Physics-constrained surrogate models for plasma-etch trench profiles.\n\n\
        Units: depths in micrometres (um), lateral position x normalized to [0, 1] from trench \
        centre to edge, durations in seconds, power in watts, pressure in mTorr, gas flows in sccm."
)]
pub struct Cli {
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration file (TOML); unknown keys are rejected.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed override (integer): dataset seed for gen-data, base member seed for train.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test recipe datasets (JSON lines, depths in um) with the oracle.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory; all files are written below it.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train deep ensembles on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory produced by gen-data.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Variant to train (baseline, accum_only, weibull); repeatable [default: baseline and weibull].
        #[arg(long = "variant", value_name = "NAME")]
        variants: Vec<Variant>,
        /// Output directory; one ensemble subdirectory per variant.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Predict a recipe's profile (mean in um, variance in um^2) and print it as JSON.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Ensemble directory, or a train output directory holding several.
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        /// Recipe file: one JSON object with steps, equipment and wafer_location.
        #[arg(long, value_name = "PATH")]
        recipe: PathBuf,
        /// Variant to use when --ckpt holds several [default: weibull].
        #[arg(long, value_name = "NAME")]
        variant: Option<Variant>,
        /// Also write prediction.json here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Evaluate ensembles on the test split: RMSE (um) and mean NLL report plus plot series.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset directory produced by gen-data.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Train output directory holding a baseline ensemble and at least one other.
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        /// Output directory for report.json and CSV series.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Compare weibull and accum_only per-step partial profiles (um) with the oracle's.
    Ablation {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; probes are the leading test records.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Train output directory holding weibull and accum_only ensembles.
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        /// Number of probe recipes (count) [default: from config, 64].
        #[arg(long, value_name = "N")]
        probes: Option<usize>,
        #[arg(long, value_name = "DIR")]
        /// Output directory for ablation.json and ablation_partials.csv.
        out: PathBuf,
    },
    /// Export baseline cross-attention (grid points x steps, row-normalized) with band summaries.
    Attention {
        #[command(flatten)]
        common: Common,
        /// Baseline ensemble directory, or a train output directory.
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        /// Recipe file (JSON object).
        #[arg(long, value_name = "PATH")]
        recipe: PathBuf,
        /// Output directory for attention.json and attention_matrix.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Per-step partial mean (um) and mixture sigma (um) for a recipe.
    Trace {
        #[command(flatten)]
        common: Common,
        /// Ensemble directory, or a train output directory.
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        /// Recipe file (JSON object).
        #[arg(long, value_name = "PATH")]
        recipe: PathBuf,
        /// Variant to use when --ckpt holds several [default: weibull].
        #[arg(long, value_name = "NAME")]
        variant: Option<Variant>,
        /// Output directory for trace.json and trace.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Render SVG plots (depth in um vs normalized x) from profile_overlay.csv, trace.json or attention.json.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Input file; repeatable.
        #[arg(long = "input", value_name = "PATH", required = true)]
        inputs: Vec<PathBuf>,
        /// Output directory for the SVG files.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Serve the HTTP API (and optionally a UI bundle) over loaded ensembles.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Ensemble or train output directory; repeatable.
        #[arg(long = "ckpt", value_name = "DIR", env = "ETCH_CKPT_DIR", required = true, value_delimiter = ',')]
        ckpts: Vec<PathBuf>,
        /// Listen address (host:port).
        #[arg(long, value_name = "ADDR", env = "ETCH_BIND", default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Directory of static UI files served at /.
        #[arg(long = "static", value_name = "DIR")]
        static_dir: Option<PathBuf>,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
