//! `ckafscil`: generate data, train, evaluate and analyse composition heads.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or validation errors.

mod commands;
mod config;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigArgs, HpOverrides, SynthOverrides};

/// Environment variable naming the default dataset directory.
pub const DATA_ENV: &str = "CKAFSCIL_DATA";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl From<ckafscil::Error> for CliError {
    fn from(e: ckafscil::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ckafscil",
    version,
    about = "Compositional few-shot class-incremental heads"
)]
pub struct Cli {
    /// Worker threads; 0 uses every core. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

/// Dataset directory, falling back to the `CKAFSCIL_DATA` environment variable.
#[derive(Debug, Clone, clap::Args)]
pub struct DataArg {
    /// Dataset directory [env: CKAFSCIL_DATA]
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl DataArg {
    pub fn resolve(&self) -> Result<PathBuf, CliError> {
        self.data
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .ok_or_else(|| CliError::Usage(format!("--data not given and {DATA_ENV} is unset")))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic compositional dataset
    Gen {
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        synth: SynthOverrides,
    },
    /// Train the base session and write a checkpoint
    TrainBase {
        #[command(flatten)]
        data: DataArg,
        /// Output checkpoint directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        hp: HpOverrides,
    },
    /// Train incremental sessions on top of a checkpoint
    TrainInc {
        /// Input checkpoint directory
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArg,
        /// Output checkpoint directory (may equal --ckpt)
        #[arg(long)]
        out: PathBuf,
        /// Train only this session; default trains every remaining session
        #[arg(long)]
        session: Option<u32>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        hp: HpOverrides,
    },
    /// Per-session accuracies and performance drop
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_enum, default_value_t = HeadArg::Composition)]
        head: HeadArg,
        /// Report path [default: <ckpt>/eval-<head>.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one run per primitive count
    Sweep {
        #[command(flatten)]
        data: DataArg,
        /// Primitive counts, comma separated
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        n_values: Vec<usize>,
        #[arg(long, value_enum, default_value_t = HeadArg::Composition)]
        head: HeadArg,
        /// Report path
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        hp: HpOverrides,
    },
    /// Importance-filtered accuracy, importance AUC and retrieval export
    Importance {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArg,
        /// Patch counts to keep, comma separated
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        keep: Vec<usize>,
        /// Class the patches are ranked against
        #[arg(long, value_enum, default_value_t = RankArg::Predicted)]
        rank_by: RankArg,
        /// Top patches per class in the retrieval export
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Report path [default: <ckpt>/importance.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Novel-class retention under hard nearest-primitive replacement
    ReuseEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArg,
        /// Replacement ratios, comma separated
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
        ratios: Vec<f64>,
        /// Replacement seed [default: the checkpoint's seed]
        #[arg(long)]
        seed: Option<u64>,
        /// Report path [default: <ckpt>/reuse.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear CKA between two tensor files
    CompareReps {
        a: PathBuf,
        b: PathBuf,
        /// `batch`: rows are inputs of two representations; `row`: rows are set members
        #[arg(long, value_enum, default_value_t = CenteringArg::Batch)]
        centering: CenteringArg,
        /// Also write a JSON result here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time composition scoring on random inputs
    Bench {
        #[arg(long, default_value_t = 100)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        n_prims: usize,
        #[arg(long, default_value_t = 64)]
        patches: usize,
        #[arg(long, default_value_t = 512)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        maps: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a JSON result here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum HeadArg {
    Composition,
    Baseline,
    Allmatch,
    Maxmatch,
}

impl From<HeadArg> for ckafscil::Head {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Composition => Self::Composition,
            HeadArg::Baseline => Self::Baseline,
            HeadArg::Allmatch => Self::Allmatch,
            HeadArg::Maxmatch => Self::Maxmatch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RankArg {
    Predicted,
    TrueLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CenteringArg {
    Batch,
    Row,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build();
    let result = match pool {
        Ok(pool) => pool.install(|| commands::run(cli.command, &argv)),
        Err(e) => Err(CliError::Usage(format!("thread pool: {e}"))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 1,
                CliError::Data(_) => 2,
            })
        }
    }
}
