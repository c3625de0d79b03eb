mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Local binary convolution networks: training, analysis and benchmarks.
#[derive(Debug, Parser)]
#[command(name = "lbcnn", version, arg_required_else_help = true)]
pub struct Cli {
    /// Seed for every stochastic choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for parallel sections. Outputs are reproducible only with 1.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write metrics.csv, model.lbcm and run.json.
    Train(TrainArgs),
    /// Accuracy of a saved model on a dataset.
    Eval(EvalArgs),
    /// Encode a binary PGM with local binary patterns.
    LbpEncode(LbpArgs),
    /// Learnable and fixed parameter counts of a network spec.
    CountParams(CountArgs),
    /// NMSE of the least-squares LBC approximation of a dense filter.
    ApproxNmse(NmseArgs),
    /// Filter de-correlation of a saved model or a generated bank.
    Decorr(DecorrArgs),
    /// Dense vs sparse-binary forward convolution: operation counts and time.
    BenchConv(BenchArgs),
    /// Finite-difference check of the analytic gradients.
    GradCheck(GradCheckArgs),
    /// Monte Carlo estimate of P(max_i (Bx)_i >= sqrt(1 - t) |x|).
    #[command(name = "theorem1-mc")]
    Theorem1Mc(Theorem1Args),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value_t = DatasetKind::Synthetic)]
    pub dataset: DatasetKind,

    /// Directory holding the MNIST IDX files (optionally gzipped).
    #[arg(long, default_value = "data/mnist")]
    pub data_dir: PathBuf,

    /// Number of training samples (MNIST: leading samples of the train split).
    #[arg(long)]
    pub train_size: Option<usize>,

    /// Number of test samples.
    #[arg(long)]
    pub test_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Network spec file; defaults to four residual LBC blocks with a 6x6 pool.
    #[arg(long)]
    pub spec: Option<PathBuf>,

    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long, default_value_t = 20)]
    pub epochs: usize,

    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,

    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,

    /// Momentum coefficient; 0 gives plain SGD.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,

    /// Evaluate the test set every this many epochs (0: only after the last).
    #[arg(long, default_value_t = 1)]
    pub test_every: usize,

    /// Record per-epoch wall time in the seconds column.
    #[arg(long)]
    pub wall_clock: bool,

    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,

    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LbpArgs {
    /// Binary (P5) PGM input.
    #[arg(long)]
    pub input: PathBuf,

    /// Window side.
    #[arg(long, default_value_t = 3, value_parser = PossibleValuesParser::new(["3", "5"]).map(|s| s.parse::<u8>().expect("listed value")))]
    pub size: u8,

    /// Output PGM file; run.json is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long)]
    pub spec: PathBuf,

    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NmseArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    pub sparsity_grid: Vec<f64>,

    #[arg(long, value_delimiter = ',', default_value = "64,128,512")]
    pub m_grid: Vec<usize>,

    /// Number of synthetic Gaussian images.
    #[arg(long, default_value_t = 100)]
    pub images: usize,

    #[arg(long, default_value_t = 3)]
    pub channels: usize,

    /// Image side.
    #[arg(long, default_value_t = 32)]
    pub size: usize,

    #[arg(long, default_value_t = 3)]
    pub kernel: usize,

    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecorrArgs {
    /// Saved model; without it a bank is generated from the flags below.
    #[arg(long)]
    pub model: Option<PathBuf>,

    #[arg(long, default_value_t = 64)]
    pub m: usize,

    #[arg(long, default_value_t = 32)]
    pub p: usize,

    #[arg(long, default_value_t = 3)]
    pub k: usize,

    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,

    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 1)]
    pub batch: usize,

    /// Input channels.
    #[arg(long, default_value_t = 32)]
    pub p: usize,

    /// Output channels.
    #[arg(long, default_value_t = 32)]
    pub m: usize,

    /// Image side.
    #[arg(long, default_value_t = 32)]
    pub size: usize,

    #[arg(long, default_value_t = 3)]
    pub k: usize,

    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9")]
    pub sparsity_grid: Vec<f64>,

    #[arg(long, default_value_t = 5)]
    pub reps: usize,

    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Network spec file; defaults to a two-block sigmoid LBC net.
    #[arg(long)]
    pub spec: Option<PathBuf>,

    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,

    #[arg(long, default_value_t = 50)]
    pub coords: usize,

    /// Samples in the random input batch.
    #[arg(long, default_value_t = 2)]
    pub batch: usize,

    /// Largest acceptable relative error; exceeding it exits with status 2.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,

    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Theorem1Args {
    #[arg(long, default_value_t = 27)]
    pub n: usize,

    #[arg(long, value_delimiter = ',', default_value = "8,64,512")]
    pub m_grid: Vec<usize>,

    #[arg(long, default_value_t = 0.5)]
    pub t: f64,

    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,

    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
