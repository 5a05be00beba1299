//! Optimal Poisson subsampling for quasi-likelihood estimation on data that is
//! streamed from disk in blocks.
//!
//! A small uniform pilot sample gives a rough estimate; each record then gets
//! an inclusion probability proportional to a cheap score, records are kept by
//! independent coin flips in a second pass, and the pooled weighted estimating
//! equation is solved by Newton-Raphson. [`distributed`] runs the second stage
//! independently on shards and combines the per-shard estimates.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distributed;
pub mod error;
pub mod estimator;
pub mod ingest;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod synth;

pub use distributed::{
    aggregate, fit_partition, run_distributed, DistributedFit, PartitionSummary,
};
pub use error::{Error, ErrorClass, Result};
pub use estimator::{
    asymptotic_variance, full_data_qle, sandwich_variance, solve_groups, solve_weighted_qle,
    subsample_hessian, weighted_score, FitResult, SampleGroup, SolverOptions, VariancePart,
    WeightedObservation,
};
pub use ingest::{
    partition_view, CsvOptions, CsvSource, Dataset, RecordSource, ResponseTransform, Schema, Shard,
    ShardSet,
};
pub use model::LinkFamily;
pub use pipeline::{run_pilot, run_two_step, PilotResult, TwoStepFit};
pub use sampling::{Criterion, SamplingPlan, ScoreContext, ThresholdMode};
pub use synth::{CaseId, CaseSpec, ExperimentParams, ExperimentReport, MseReference};
