//! Single-machine two-step subsampling: a uniform pilot pass, then a second
//! pass drawing records with shrinkage probabilities built from the pilot.
//!
//! The final estimate solves the pooled weighted equation over both samples.
//! Pilot weights are multiplied by `c0 = (r0 / N) / (K r / N)`, the ratio of
//! the pilot's sampling rate to the second stage's total rate, so the pilot
//! counts in proportion to the information it carries instead of as a second
//! full-population estimate. The probabilities stored on the records are
//! always the ones used for the draws.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    self, sandwich_variance, solve_groups, FitResult, SampleGroup, SolverOptions, VariancePart,
    WeightedObservation,
};
use crate::ingest::RecordSource;
use crate::linalg::{self, add_outer_lower, dot, fill_upper};
use crate::model::LinkFamily;
use crate::rng::Stream;
use crate::sampling::{
    poisson_draw, threshold_quantile, waterfill, Criterion, DrawStats, MvNorm, SamplingPlan,
    ScoreContext, ThresholdMode,
};

/// Pilot sizes below `PILOT_FACTOR * d` are rejected.
pub const PILOT_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PilotResult {
    pub beta0: DVector<f64>,
    /// Mean pilot score `|y - psi| ||Sigma^-1 x||`.
    pub psi_hat_mv: f64,
    /// Mean pilot score `|y - psi| ||x||`.
    pub psi_hat_mvc: f64,
    /// `|S|^-1 sum_S psi'(beta0' x) x x'`.
    pub sigma0: DMatrix<f64>,
    pub sigma0_inv: DMatrix<f64>,
    pub pilot_sample: Vec<WeightedObservation>,
    pub realized_r0: usize,
    pub r0: f64,
    /// Inclusion probability of every pilot record, `min(1, r0 / N)`.
    pub p0: f64,
    /// Rows in the data the pilot was drawn from.
    pub n: u64,
    pub iterations: usize,
    pub converged: bool,
    /// All pilot residuals were zero, so no informative score exists.
    pub degenerate: bool,
}

impl PilotResult {
    pub fn psi_hat(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Mv => self.psi_hat_mv,
            Criterion::Mvc => self.psi_hat_mvc,
            Criterion::Uniform => 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.beta0.len()
    }
}

/// Draws the uniform pilot and computes `beta0`, the score normalizers and `Sigma(beta0)`.
pub fn run_pilot(
    source: &dyn RecordSource,
    family: LinkFamily,
    r0: f64,
    seed: u64,
    solver: &SolverOptions,
) -> Result<PilotResult> {
    let d = source.dim();
    let n = source.count()?;
    if n == 0 {
        return Err(Error::EmptySample);
    }
    if !(r0 >= PILOT_FACTOR * d as f64) {
        return Err(Error::Config(format!(
            "pilot size {r0} is below {} for {d} covariates",
            PILOT_FACTOR * d as f64
        )));
    }
    let p0 = (r0 / n as f64).min(1.0);
    let (sample, _) = poisson_draw(source, seed, Stream::Pilot, |_, _| p0)?;
    let realized = sample.len();
    if realized < d + 1 {
        return Err(Error::PilotFailed(format!(
            "pilot drew {realized} records for {d} covariates; raise r0"
        )));
    }
    let fit = estimator::solve_weighted_qle(&sample, family, &DVector::zeros(d), solver).map_err(
        |e| match e {
            Error::SingularHessian { rcond } => Error::PilotFailed(format!(
                "pilot Newton matrix is singular (rcond {rcond:.3e}); raise r0"
            )),
            other => other,
        },
    )?;
    if !fit.converged {
        warn!(
            "pilot fit stopped after {} iterations with score norm {:.3e}",
            fit.iterations, fit.score_norm
        );
    }
    let beta0 = fit.beta;
    let b = beta0.as_slice();

    let mut sigma0 = DMatrix::zeros(d, d);
    for o in &sample {
        add_outer_lower(&mut sigma0, &o.x, family.eval(dot(b, &o.x)).derivative);
    }
    fill_upper(&mut sigma0);
    let sigma0 = sigma0 / realized as f64;
    let sigma0_inv = linalg::spd_inverse(&sigma0).map_err(|_| {
        Error::PilotFailed(format!(
            "pilot Sigma is singular (rcond {:.3e}); raise r0",
            linalg::reciprocal_condition(&sigma0)
        ))
    })?;
    let mv = MvNorm::new(&sigma0).map_err(|_| {
        Error::PilotFailed("pilot Sigma^2 is not positive definite; raise r0".into())
    })?;

    let mut scratch = vec![0.0; d];
    let (mut sum_mv, mut sum_mvc) = (0.0, 0.0);
    for o in &sample {
        let resid = (o.y - family.mean_unchecked(dot(b, &o.x))).abs();
        sum_mvc += resid * dot(&o.x, &o.x).sqrt();
        sum_mv += resid * mv.norm(&o.x, &mut scratch);
    }
    let psi_hat_mv = sum_mv / realized as f64;
    let psi_hat_mvc = sum_mvc / realized as f64;
    let degenerate = !(psi_hat_mvc > 0.0) || !(psi_hat_mv > 0.0);
    info!(
        "pilot: {realized} records (expected {r0}), {} Newton iterations",
        fit.iterations
    );

    Ok(PilotResult {
        beta0,
        psi_hat_mv,
        psi_hat_mvc,
        sigma0,
        sigma0_inv,
        pilot_sample: sample,
        realized_r0: realized,
        r0,
        p0,
        n,
        iterations: fit.iterations,
        converged: fit.converged,
        degenerate,
    })
}

/// How the second-stage probabilities were set up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextInfo {
    /// Criterion actually used (uniform after a degenerate-pilot fallback).
    pub criterion: Criterion,
    pub threshold: f64,
    pub psi_hat: f64,
    pub fell_back_to_uniform: bool,
}

/// Builds the probability rule for sampling `n` rows of `source` at expected size `r`.
///
/// `source` is only scanned in [`ThresholdMode::Exact`].
pub fn score_context(
    source: &dyn RecordSource,
    family: LinkFamily,
    pilot: &PilotResult,
    plan: &SamplingPlan,
    n: u64,
) -> Result<(ScoreContext, ContextInfo)> {
    let nf = n as f64;
    let r = plan.expected_size;
    let uniform = |fell_back| {
        (
            ScoreContext::uniform(nf, r),
            ContextInfo {
                criterion: Criterion::Uniform,
                threshold: f64::INFINITY,
                psi_hat: 1.0,
                fell_back_to_uniform: fell_back,
            },
        )
    };
    if plan.criterion == Criterion::Uniform {
        return Ok(uniform(false));
    }
    if pilot.degenerate {
        warn!("all pilot residuals are zero; falling back to uniform probabilities");
        return Ok(uniform(true));
    }
    let mv = match plan.criterion {
        Criterion::Mv => Some(MvNorm::new(&pilot.sigma0)?),
        _ => None,
    };
    let mut ctx = ScoreContext {
        criterion: plan.criterion,
        family,
        beta0: pilot.beta0.as_slice().to_vec(),
        mv,
        psi_hat: pilot.psi_hat(plan.criterion),
        n: nf,
        r,
        rho: plan.shrinkage,
        threshold: f64::INFINITY,
    };
    let mut scratch = ctx.scratch();
    match plan.threshold_mode {
        ThresholdMode::Infinite => {}
        ThresholdMode::Quantile => {
            let scores: Vec<f64> = pilot
                .pilot_sample
                .iter()
                .map(|o| ctx.raw_score(&o.x, o.y, &mut scratch))
                .collect();
            let m = threshold_quantile(&scores, r, n)?;
            ctx.threshold = m;
            ctx.psi_hat = scores.iter().map(|s| s.min(m)).sum::<f64>() / scores.len() as f64;
        }
        ThresholdMode::Exact => {
            let mut scores = Vec::with_capacity(n as usize);
            source.scan(&mut |rec| {
                scores.push(ctx.raw_score(rec.x, rec.y, &mut scratch));
                Ok(())
            })?;
            let w = waterfill(&scores, r)?;
            ctx.threshold = w.threshold;
            ctx.psi_hat =
                scores.iter().map(|s| s.min(w.threshold)).sum::<f64>() / scores.len() as f64;
        }
    }
    if !(ctx.psi_hat > 0.0) {
        warn!("score normalizer is zero; falling back to uniform probabilities");
        return Ok(uniform(true));
    }
    let info = ContextInfo {
        criterion: ctx.criterion,
        threshold: ctx.threshold,
        psi_hat: ctx.psi_hat,
        fell_back_to_uniform: false,
    };
    Ok((ctx, info))
}

/// Draws the second-stage sample from `source` under `ctx`.
pub fn draw_second_stage(
    source: &dyn RecordSource,
    ctx: &ScoreContext,
    seed: u64,
) -> Result<(Vec<WeightedObservation>, DrawStats)> {
    let mut scratch = ctx.scratch();
    let (sample, stats) = poisson_draw(source, seed, Stream::Second, |x, y| {
        ctx.probability(x, y, &mut scratch)
    })?;
    if stats.zero_probability > 0 {
        warn!(
            "{} records have probability zero and can never be sampled",
            stats.zero_probability
        );
    }
    Ok((sample, stats))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SecondStage {
    pub sample: Vec<WeightedObservation>,
    pub stats: DrawStats,
    pub context: ContextInfo,
    /// Multiplier on the pilot's inverse-probability weights in the pooled fit.
    pub pilot_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoStepFit {
    pub fit: FitResult,
    pub pilot: PilotResult,
    pub second_stage: SecondStage,
}

/// Pilot weight multiplier `(r0 / N) / (total second-stage rate)`, at most 1.
pub fn pilot_scale(pilot: &PilotResult, total_second_size: f64) -> f64 {
    let rate = total_second_size / pilot.n as f64;
    (pilot.p0 / rate).min(1.0)
}

/// Full two-step procedure on one machine.
pub fn run_two_step(
    source: &dyn RecordSource,
    family: LinkFamily,
    plan: &SamplingPlan,
    r0: f64,
    solver: &SolverOptions,
) -> Result<TwoStepFit> {
    let n = source.count()?;
    plan.validate(n)?;
    let pilot = run_pilot(source, family, r0, plan.seed, solver)?;
    let (ctx, context) = score_context(source, family, &pilot, plan, n)?;
    let (sample, stats) = draw_second_stage(source, &ctx, plan.seed)?;
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    info!(
        "second stage: {} records (expected {:.1})",
        sample.len(),
        stats.expected_size
    );

    let c0 = pilot_scale(&pilot, plan.expected_size);
    let groups = [
        SampleGroup {
            obs: &pilot.pilot_sample,
            scale: c0,
        },
        SampleGroup::unit(&sample),
    ];
    let mut fit = solve_groups(&groups, family, &pilot.beta0, solver)?;
    if !fit.converged {
        warn!(
            "second-stage fit stopped after {} iterations with score norm {:.3e}",
            fit.iterations, fit.score_norm
        );
    }
    let nf = n as f64;
    let bread = estimator::weighted_hessian_sum(&groups, family, &fit.beta)? / nf;
    let parts = [
        VariancePart {
            sample: &pilot.pilot_sample,
            beta: &fit.beta,
            scale: c0,
        },
        VariancePart {
            sample: &sample,
            beta: &fit.beta,
            scale: 1.0,
        },
    ];
    fit.variance = Some(sandwich_variance(&parts, family, &bread, n)?);
    fit.hessian = bread;

    Ok(TwoStepFit {
        fit,
        pilot,
        second_stage: SecondStage {
            sample,
            stats,
            context,
            pilot_scale: c0,
        },
    })
}
