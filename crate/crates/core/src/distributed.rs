//! Divide-and-conquer subsampling over data shards.
//!
//! A global uniform pilot is pooled across all shards. Each shard then draws
//! its own shrinkage-probability subsample, solves its weighted equation and
//! reports a compact summary. The coordinator combines the shard estimates
//! (and the pilot) by Hessian-weighted averaging:
//!
//! ```text
//! beta = (sum_j n_j H_j)^-1 sum_j n_j H_j beta_j
//! V    = (sum_j n_j H_j)^-1 (sum_j C_j) (sum_j n_j H_j)^-1
//! ```
//!
//! where `H_j` is the shard's `n_j`-normalized Newton matrix and `C_j` its
//! un-normalized sampling variance piece. Shards are modeled in-process; each
//! is processed as an independent task.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{self, solve_weighted_qle, FitResult, SampleGroup, SolverOptions};
use crate::ingest::{RecordSource, Shard, ShardSet};
use crate::linalg;
use crate::model::LinkFamily;
use crate::pipeline::{self, draw_second_stage, score_context, ContextInfo, PilotResult};
use crate::sampling::SamplingPlan;

/// Identifier reserved for the pilot's summary.
pub const PILOT_PARTITION: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub partition_id: usize,
    /// First global record index of the shard; fixes the reduction order.
    pub first_index: u64,
    pub beta: DVector<f64>,
    /// `n^-1 sum_S (1/p) psi'(beta' x) x x'` at `beta` (positive definite form).
    pub hessian: DMatrix<f64>,
    /// `sum_S (y - psi)^2 x x' (1 - p) / p^2` at `beta`.
    pub vc_contrib: DMatrix<f64>,
    /// Rows in the shard (the full data size for the pilot summary).
    pub n: u64,
    pub realized_size: usize,
    pub expected_size: f64,
    pub iterations: usize,
    pub converged: bool,
    pub context: Option<ContextInfo>,
}

/// Draws and fits one shard given the global pilot.
pub fn fit_partition(
    shard: &dyn RecordSource,
    family: LinkFamily,
    pilot: &PilotResult,
    plan: &SamplingPlan,
    partition_id: usize,
    solver: &SolverOptions,
) -> Result<PartitionSummary> {
    let n = shard.count()?;
    if n == 0 {
        return Err(Error::EmptySample);
    }
    plan.validate(n)?;
    let (ctx, context) = score_context(shard, family, pilot, plan, n)?;
    let (sample, stats) = draw_second_stage(shard, &ctx, plan.seed)?;
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let fit = solve_weighted_qle(&sample, family, &pilot.beta0, solver)?;
    if !fit.converged {
        warn!(
            "partition {partition_id}: fit stopped after {} iterations with score norm {:.3e}",
            fit.iterations, fit.score_norm
        );
    }
    let hessian =
        estimator::weighted_hessian_sum(&[SampleGroup::unit(&sample)], family, &fit.beta)?
            / n as f64;
    let vc_contrib = estimator::variance_contribution(&sample, family, &fit.beta)?;
    Ok(PartitionSummary {
        partition_id,
        first_index: shard.index_range()?.start,
        beta: fit.beta,
        hessian: linalg::symmetrize(hessian),
        vc_contrib,
        n,
        realized_size: sample.len(),
        expected_size: stats.expected_size,
        iterations: fit.iterations,
        converged: fit.converged,
        context: Some(context),
    })
}

/// The pilot as a summary, with its weights multiplied by `scale`.
pub fn pilot_summary(
    pilot: &PilotResult,
    family: LinkFamily,
    scale: f64,
) -> Result<PartitionSummary> {
    let group = [SampleGroup {
        obs: &pilot.pilot_sample,
        scale,
    }];
    let hessian = estimator::weighted_hessian_sum(&group, family, &pilot.beta0)? / pilot.n as f64;
    let vc = estimator::variance_contribution(&pilot.pilot_sample, family, &pilot.beta0)?
        * (scale * scale);
    Ok(PartitionSummary {
        partition_id: PILOT_PARTITION,
        first_index: 0,
        beta: pilot.beta0.clone(),
        hessian,
        vc_contrib: vc,
        n: pilot.n,
        realized_size: pilot.realized_r0,
        expected_size: pilot.r0.min(pilot.n as f64),
        iterations: pilot.iterations,
        converged: pilot.converged,
        context: None,
    })
}

/// Hessian-weighted combination of shard summaries.
///
/// The reduction runs in a fixed order (pilot first, then by first record
/// index), so the result does not depend on the order of `summaries`.
pub fn aggregate(summaries: &[PartitionSummary]) -> Result<FitResult> {
    let first = summaries.first().ok_or(Error::EmptySample)?;
    let d = first.beta.len();
    let mut ordered: Vec<&PartitionSummary> = summaries.iter().collect();
    ordered.sort_by_key(|s| {
        (
            s.partition_id != PILOT_PARTITION,
            s.first_index,
            s.partition_id,
        )
    });
    for w in ordered.windows(2) {
        if w[0].partition_id == w[1].partition_id {
            return Err(Error::Config(format!(
                "duplicate partition id {}",
                w[0].partition_id
            )));
        }
    }
    let mut bread = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    let mut meat = DMatrix::zeros(d, d);
    for s in &ordered {
        if s.beta.len() != d || s.hessian.nrows() != d || s.vc_contrib.nrows() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: s.beta.len(),
            });
        }
        let h = &s.hessian * s.n as f64;
        rhs += &h * &s.beta;
        bread += h;
        meat += &s.vc_contrib;
    }
    let bread = linalg::symmetrize(bread);
    let beta = linalg::spd_solve(&bread, &rhs)?;
    let variance = linalg::sandwich(&bread, &meat)?;

    let shard_rows: u64 = ordered
        .iter()
        .filter(|s| s.partition_id != PILOT_PARTITION)
        .map(|s| s.n)
        .sum();
    let n_total = if shard_rows > 0 { shard_rows } else { first.n };
    Ok(FitResult {
        beta,
        hessian: bread / n_total as f64,
        variance: Some(variance),
        iterations: ordered.iter().map(|s| s.iterations).max().unwrap_or(0),
        converged: ordered.iter().all(|s| s.converged),
        subsample_size: ordered.iter().map(|s| s.realized_size).sum(),
        // No single equation is solved at the combined estimate.
        score_norm: 0.0,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributedFit {
    pub fit: FitResult,
    pub pilot: PilotResult,
    /// Pilot summary first, then shard summaries in reduction order.
    pub summaries: Vec<PartitionSummary>,
    pub pilot_scale: f64,
}

/// Pilot over all shards, per-shard draws and fits in parallel, then aggregation.
pub fn run_distributed(
    shards: &[Shard],
    family: LinkFamily,
    plan: &SamplingPlan,
    r0: f64,
    solver: &SolverOptions,
) -> Result<DistributedFit> {
    let k = shards.len();
    if k == 0 {
        return Err(Error::Config("at least one shard is required".into()));
    }
    let r = plan.expected_size;
    if (k as f64) > r.cbrt() {
        warn!(
            "K = {k} shards exceeds r^(1/3) = {:.2}; the combined estimator may lose efficiency",
            r.cbrt()
        );
    }
    // The pilot scans shards in index order whatever order they were supplied in.
    let mut ordered = shards.to_vec();
    ordered.sort_by_key(|s| (s.range().start, s.id));
    let all = ShardSet(&ordered);
    let pilot = pipeline::run_pilot(&all, family, r0, plan.seed, solver)?;
    let c0 = pipeline::pilot_scale(&pilot, k as f64 * r);

    let results: Vec<(usize, Result<PartitionSummary>)> = shards
        .par_iter()
        .map(|s| (s.id, fit_partition(s, family, &pilot, plan, s.id, solver)))
        .collect();
    let mut summaries = vec![pilot_summary(&pilot, family, c0)?];
    let mut failures = Vec::new();
    for (id, res) in results {
        match res {
            Ok(s) => summaries.push(s),
            Err(e) => failures.push((id, e)),
        }
    }
    if !failures.is_empty() {
        return Err(Error::PartitionsFailed(failures));
    }
    let fit = aggregate(&summaries)?;
    summaries.sort_by_key(|s| {
        (
            s.partition_id != PILOT_PARTITION,
            s.first_index,
            s.partition_id,
        )
    });
    info!(
        "combined {k} shards and the pilot: {} records",
        fit.subsample_size
    );
    Ok(DistributedFit {
        fit,
        pilot,
        summaries,
        pilot_scale: c0,
    })
}
