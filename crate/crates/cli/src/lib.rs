//! Command-line front end: property verification, decode benchmarks, cache
//! accounting and toy training.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtla_core::{Precision, Variant};

#[cfg(debug_assertions)]
mod alloc_count;
pub mod bench;
mod error;
pub mod report;
pub mod train;
pub mod verify;

pub use error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mtla", version, about = "Temporal latent attention toolkit")]
pub struct Cli {
    /// Floating-point precision for all computation.
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::Double)]
    pub precision: PrecisionArg,
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the equivalence, mask and gradient property suite.
    Verify(VerifyArgs),
    /// Time incremental decoding and write a CSV report.
    Bench(BenchArgs),
    /// Train the toy decoder on the copy task and save a checkpoint.
    TrainToy(TrainArgs),
    /// Print per-token KV-cache sizes for every variant.
    CacheReport(ReportArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Random trials per property.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Replace the stride-aware mask with a plain causal one.
    #[arg(long, hide = true)]
    pub corrupt_mask: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "mtla")]
    pub variant: Vec<Variant>,
    /// Compression ratios for MTLA rows.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub s: Vec<usize>,
    #[arg(long, default_value_t = 512)]
    pub d: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 9)]
    pub layers: usize,
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024,2048")]
    pub probe_lengths: Vec<usize>,
    /// Timed steps ending at each probe length.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// CSV destination; `-` writes to standard output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "mtla")]
    pub variant: Variant,
    #[arg(long, default_value_t = 2)]
    pub s: usize,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value = "toy.ckpt")]
    pub checkpoint: PathBuf,
    /// `key = value` overrides of the model config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stop once held-out accuracy reaches this value.
    #[arg(long, default_value_t = 0.99)]
    pub target_accuracy: f64,
    #[arg(long, default_value_t = 64)]
    pub eval_size: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "d_h", alias = "d-h", default_value_t = 64)]
    pub d_h: usize,
    #[arg(long = "n_h", alias = "n-h", default_value_t = 8)]
    pub n_h: usize,
    #[arg(long, default_value_t = 9)]
    pub layers: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub s_list: Vec<usize>,
    /// GQA group counts; defaults to `n_h / 2`.
    #[arg(long, value_delimiter = ',')]
    pub g_list: Vec<usize>,
}

/// Runs the parsed command, writing its report to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> CliResult {
    let precision = Precision::from(cli.precision);
    match &cli.command {
        Command::Verify(a) => verify::cmd_verify(a, precision, cli.seed, out),
        Command::Bench(a) => bench::cmd_bench(a, precision, cli.seed, out),
        Command::TrainToy(a) => train::cmd_train_toy(a, precision, cli.seed, out),
        Command::CacheReport(a) => report::cmd_cache_report(a, out),
    }
}
