//! Command-line configuration. The parsed form is also what result documents
//! embed, so every default is resolved by the time it is serialized.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use poissub::{
    CaseId, Criterion, CsvOptions, LinkFamily, MseReference, ResponseTransform, Schema,
    ThresholdMode,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Parser, Serialize, Deserialize)]
#[command(
    name = "poissub",
    version,
    about = "Optimal Poisson subsampling for quasi-likelihood estimation"
)]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum Command {
    /// Write a synthetic case as headerless CSV plus a JSON sidecar.
    GenData(GenDataArgs),
    /// Full-data quasi-likelihood estimate.
    FitFull(FitFullArgs),
    /// Two-step optimal subsampling estimate.
    Fit(FitArgs),
    /// Pilot, per-shard subsampling fits and aggregation.
    FitDistributed(FitDistributedArgs),
    /// Replicated subsampling on a synthetic case: MSE and interval coverage.
    Experiment(ExperimentArgs),
    /// Replications over a grid of shrinkage values.
    RhoSweep(RhoSweepArgs),
    /// Wall-time comparison of the sampling methods and the full-data fit.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct OutputArgs {
    /// Write the result here instead of standard output (a directory for gen-data).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Worker threads; defaults to the machine's parallelism. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Include wall-clock timings in result documents.
    #[arg(long, global = true)]
    pub record_timing: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Input CSV file(s), read as one stream in the given order.
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub y_col: usize,
    /// Comma-separated covariate columns; default is every column except y.
    #[arg(long, value_delimiter = ',')]
    pub x_cols: Option<Vec<usize>>,
    /// Prepend a constant covariate.
    #[arg(long)]
    pub intercept: bool,
    #[arg(long, default_value_t = poissub::ingest::DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
    /// Added to every response as it is read.
    #[arg(long)]
    pub y_shift: Option<f64>,
    /// Skip one header line per file.
    #[arg(long)]
    pub header: bool,
}

impl DataArgs {
    pub fn csv_options(&self) -> CsvOptions {
        csv_options(
            self.y_col,
            &self.x_cols,
            self.intercept,
            self.block_size,
            self.y_shift,
            self.header,
        )
    }
}

fn csv_options(
    y_col: usize,
    x_cols: &Option<Vec<usize>>,
    intercept: bool,
    block_size: usize,
    y_shift: Option<f64>,
    header: bool,
) -> CsvOptions {
    CsvOptions {
        schema: Schema {
            y_col,
            x_cols: x_cols.clone(),
            intercept,
        },
        block_size,
        has_header: header,
        transform: y_shift.map(ResponseTransform::shift),
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// identity, exp or logistic.
    #[arg(long, default_value = "exp")]
    pub family: LinkFamily,
    /// Add ridge * I to every Newton matrix.
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SamplingArgs {
    /// uniform, mv or mvc.
    #[arg(long, default_value = "mvc")]
    pub criterion: Criterion,
    /// Expected second-stage subsample size (per shard in distributed runs).
    #[arg(long)]
    pub r: f64,
    /// Expected pilot size.
    #[arg(long, default_value_t = 200.0)]
    pub r0: f64,
    /// Shrinkage toward uniform probabilities.
    #[arg(long, default_value_t = 0.2)]
    pub rho: f64,
    /// inf, quantile or exact.
    #[arg(long, default_value = "inf")]
    pub threshold: ThresholdMode,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Confidence level of the reported intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub case: CaseId,
    #[arg(long, default_value_t = poissub::synth::DESK_N)]
    pub n: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FitFullArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FitDistributedArgs {
    /// One CSV file per shard, or a directory whose *.csv files are the shards.
    #[arg(long, num_args = 1.., conflicts_with = "data", required_unless_present = "data")]
    pub partitions: Vec<PathBuf>,
    /// Input CSV file(s) to split logically into --K shards.
    #[arg(long, num_args = 1.., requires = "k")]
    pub data: Vec<PathBuf>,
    /// Number of contiguous shards; defaults to one per partition file.
    #[arg(long = "K", id = "k")]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub y_col: usize,
    #[arg(long, value_delimiter = ',')]
    pub x_cols: Option<Vec<usize>>,
    #[arg(long)]
    pub intercept: bool,
    #[arg(long, default_value_t = poissub::ingest::DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
    #[arg(long)]
    pub y_shift: Option<f64>,
    #[arg(long)]
    pub header: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

impl FitDistributedArgs {
    pub fn csv_options(&self) -> CsvOptions {
        csv_options(
            self.y_col,
            &self.x_cols,
            self.intercept,
            self.block_size,
            self.y_shift,
            self.header,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    /// The full-data estimate.
    Full,
    /// The coefficients the data were generated from.
    True,
}

impl From<Reference> for MseReference {
    fn from(r: Reference) -> Self {
        match r {
            Reference::Full => MseReference::FullQle,
            Reference::True => MseReference::TrueBeta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct StudyArgs {
    #[arg(long)]
    pub case: CaseId,
    #[arg(long, default_value_t = poissub::synth::DESK_N)]
    pub n: u64,
    /// Seed of the generated data set.
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "uniform,mv,mvc")]
    pub methods: Vec<Criterion>,
    #[arg(long, default_value_t = 1000.0)]
    pub r: f64,
    #[arg(long, default_value_t = 200.0)]
    pub r0: f64,
    #[arg(long = "K", default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value = "inf")]
    pub threshold: ThresholdMode,
    /// Replications.
    #[arg(long = "T", default_value_t = 500)]
    pub t: usize,
    /// Seed of the replication stream.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// 0-based coefficient whose interval coverage is reported.
    #[arg(long, default_value_t = 1)]
    pub coverage_index: usize,
    /// MSE target; defaults to the case's own convention.
    #[arg(long, value_enum)]
    pub reference: Option<Reference>,
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub study: StudyArgs,
    #[arg(long, default_value_t = 0.2)]
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RhoSweepArgs {
    #[command(flatten)]
    pub study: StudyArgs,
    /// Comma-separated shrinkage values.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.01,0.1,0.25,0.5,0.75,0.99"
    )]
    pub rho_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    #[arg(long, default_value = "s4")]
    pub case: CaseId,
    #[arg(long, default_value_t = 500_000)]
    pub n: u64,
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "uniform,mvc,mv")]
    pub methods: Vec<Criterion>,
    #[arg(long, value_delimiter = ',', default_value = "1000")]
    pub r_grid: Vec<f64>,
    #[arg(long, default_value_t = 400.0)]
    pub r0: f64,
    #[arg(long, default_value_t = 0.2)]
    pub rho: f64,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

impl RunConfig {
    /// Fills in settings whose defaults depend on the machine or the case.
    pub fn resolve(&mut self) {
        if self.output.threads.is_none() {
            self.output.threads = Some(rayon::current_num_threads());
        }
        if let Command::Experiment(ExperimentArgs { study, .. })
        | Command::RhoSweep(RhoSweepArgs { study, .. }) = &mut self.command
        {
            if study.reference.is_none() {
                study.reference = Some(match study.case.default_reference() {
                    MseReference::FullQle => Reference::Full,
                    MseReference::TrueBeta => Reference::True,
                });
            }
        }
    }
}
