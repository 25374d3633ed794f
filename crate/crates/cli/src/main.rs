mod commands;
mod config;
mod http;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hccm::model::Variant;

use crate::config::ConfigError;

#[derive(Parser, Debug)]
#[command(name = "hccm", version, about = "Hybrid CNN CTR model: data, training, evaluation and serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run config with sections data, model, train, cache, serve.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed override: data seed for gen-data, training seed elsewhere.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config override `section.field=value` (repeatable; wins over the file).
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Report format on stdout.
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    pub format: Format,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic impression log and image catalog.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the frozen CNN over the catalog and store the feature maps.
    Precompute {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one variant and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Feature-map cache to train from (overrides cache.path).
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Also write the JSON metrics report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Export per-image representations of a checkpoint for serving.
    ExportTable {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Answer prediction requests from a representation table.
    Serve {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Listen for HTTP POST /predict on this port.
        #[arg(long, conflicts_with = "replay")]
        http: Option<u16>,
        /// Replay newline-delimited JSON requests from this file.
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Replay output file (default stdout).
        #[arg(long, requires = "replay")]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient check on the toy configuration.
    Gradcheck {
        #[arg(long, value_parser = parse_variant, default_value = "HCCM")]
        variant: Variant,
        #[command(flatten)]
        common: Common,
    },
    /// Train all four variants and report AUC and gain over DIN.
    Ablation {
        /// Existing dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of training seeds, starting at the configured seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: hccm::Error| e.to_string())
}

/// Exit status: 2 for configuration problems, 1 for runtime failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<hccm::Error>() {
        Some(hccm::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
