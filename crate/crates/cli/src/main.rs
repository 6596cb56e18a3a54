mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowcrypt::Error;

#[derive(Parser, Debug)]
#[command(name = "flowcrypt", version, about = "Feature-space encryption with normalizing flows")]
pub struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true, env = "FLOWCRYPT_SEED")]
    pub seed: Option<u64>,

    /// Worker threads for Monte Carlo and training. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Format of dataset outputs. Inputs ending in `.csv` are read as CSV.
    #[arg(long, global = true, value_enum, default_value_t = DataFormat::Ftns)]
    pub format: DataFormat,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataFormat {
    Ftns,
    Csv,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a Haar-uniform orthogonal key.
    Keygen {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a flow model on a dataset.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// JSON training configuration; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_model: PathBuf,
        /// JSONL training log. Defaults to the model path with `.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Encrypt a dataset.
    Encrypt(CryptArgs),
    /// Decrypt a dataset.
    Decrypt(CryptArgs),
    /// Bits per dimension of a dataset under a flow.
    EvalBpd {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Treat the data as 8-bit values and apply logit dequantization with
        /// this alpha. Without it the data are scored as continuous values.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Total variation distance, analytic or estimated from two sample sets.
    Tv {
        #[arg(long, requires = "q", conflicts_with_all = ["mu1", "mu2", "sigma"])]
        p: Option<PathBuf>,
        #[arg(long, requires = "p")]
        q: Option<PathBuf>,
        #[arg(long, requires_all = ["mu2", "sigma"])]
        mu1: Option<f64>,
        #[arg(long)]
        mu2: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Audit the recovery bound with the maximum-likelihood adversary.
    Audit {
        #[arg(long, default_value_t = 0.25)]
        theta: f64,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, value_enum, default_value_t = Source::ExactGaussian)]
        source: Source,
        /// Flow for `--source flow`.
        #[arg(long, required_if_eq("source", "flow"))]
        model: Option<PathBuf>,
        /// Data for `--source flow`.
        #[arg(long, required_if_eq("source", "flow"))]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 360)]
        grid_size: usize,
        #[arg(long, default_value_t = 20_000)]
        ball_samples: usize,
    },
    /// Reconstruct a training input from its gradients.
    AttackDlg {
        /// JSON victim and attack configuration.
        #[arg(long)]
        victim_config: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Row of the dataset the victim trains on.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Encrypt the row with `--model`/`--key` before computing gradients.
        #[arg(long, requires_all = ["model", "key"])]
        encrypted: bool,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        key: Option<PathBuf>,
        /// Where to write the recovered input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Source {
    ExactGaussian,
    Flow,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset file (FTNS, or CSV by extension).
    #[arg(long = "data")]
    pub path: PathBuf,
    /// CSV input carries a trailing integer label column.
    #[arg(long)]
    pub labeled: bool,
}

#[derive(Args, Debug)]
pub struct CryptArgs {
    #[arg(long, required_unless_present = "class_map", requires = "key")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub key: Option<PathBuf>,
    /// JSON manifest mapping each label to `{ "model": ..., "key": ... }`.
    #[arg(long, conflicts_with_all = ["model", "key"])]
    pub class_map: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub const EXIT_IO: u8 = 2;
pub const EXIT_ARGUMENT: u8 = 3;
pub const EXIT_DEGENERATE: u8 = 4;
pub const EXIT_MISMATCH: u8 = 5;
pub const EXIT_CORRUPT: u8 = 6;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) => EXIT_IO,
        Error::InvalidArgument(_) | Error::InvalidDimension(_) | Error::Csv(_) => EXIT_ARGUMENT,
        Error::DegenerateData(_) => EXIT_DEGENERATE,
        Error::ShapeMismatch(_) | Error::UnknownLabel(_) => EXIT_MISMATCH,
        Error::Corrupt(_) | Error::Validation(_) => EXIT_CORRUPT,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ARGUMENT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be >= 1");
        return ExitCode::from(EXIT_ARGUMENT);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: could not start worker pool: {e}");
        return ExitCode::from(1);
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
