use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "lvgp", version, about = "Bayesian GPLVM training with MF, IW and Langevin-AIS bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write manifest, metrics and checkpoint to --out.
    Train(TrainArgs),
    /// Estimate negative ELBO, NELL and MSE of a checkpoint with standard errors.
    Eval(EvalArgs),
    /// Predict the masked cells of a data set from a checkpoint.
    Reconstruct(ReconstructArgs),
    /// Check unbiasedness of the AIS evidence estimate on a Gaussian toy.
    EvidenceCheck(EvidenceArgs),
    /// Finite-difference gradient check on a tiny instance.
    Gradcheck(GradcheckArgs),
    /// Time training epochs against the flow length.
    Benchmark(BenchmarkArgs),
    /// Write a synthetic data set as CSV.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// Numeric CSV, one row per data point. `NaN` cells count as missing.
    #[arg(long)]
    pub data: PathBuf,
    /// The first line of the CSV is a header.
    #[arg(long)]
    pub header: bool,
    /// Zero-based column holding integer class labels, excluded from the data.
    #[arg(long)]
    pub label_column: Option<usize>,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "ais")]
    pub method: String,
    #[arg(long, default_value_t = 10)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 50)]
    pub inducing: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 3000)]
    pub iters: usize,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.02)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "linear")]
    pub anneal: String,
    /// Initial Langevin step size (default: 1e-3 times the squared median
    /// distance between the initial latent means).
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub adaptive_step: Switch,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    pub detach_flow: Switch,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub standardize: Switch,
    /// Fraction of rows that receive missing cells.
    #[arg(long, default_value_t = 0.0)]
    pub missing_rows: f64,
    /// Fraction of cells masked within each chosen row.
    #[arg(long, default_value_t = 0.0)]
    pub missing_pixels: f64,
    /// Per-chain step cap multiplier; `0` disables the cap.
    #[arg(long, default_value_t = 1.0)]
    pub step_cap: f64,
    /// Full-data evaluation interval in iterations (0 = only at the end).
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
pub struct EvidenceArgs {
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,8,32")]
    pub k_list: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub chains: usize,
    #[arg(long, default_value_t = 0.05)]
    pub eta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20,25")]
    pub k_list: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    #[arg(long, value_delimiter = ',', default_value = "mf,iw,ais")]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 50)]
    pub inducing: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional CSV of the timing table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Oilflow,
    LowRank,
    Images,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Columns for `low-rank`.
    #[arg(long, default_value_t = 20)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise_sd: f64,
    /// Image height and width for `images`.
    #[arg(long, default_value_t = 28)]
    pub rows: usize,
    #[arg(long, default_value_t = 20)]
    pub cols: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::EvidenceCheck(a) => commands::evidence_check(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Benchmark(a) => commands::benchmark(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", commands::describe(&e));
            commands::exit_code_for(&e)
        }
    }
}
