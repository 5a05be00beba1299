//! Subsampling scores, the capped proportional allocation, shrinkage
//! probabilities and streaming Poisson draws.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::WeightedObservation;
use crate::ingest::RecordSource;
use crate::linalg::{self, dot};
use crate::model::LinkFamily;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Uniform,
    /// Minimizes the trace of the full asymptotic variance.
    Mv,
    /// Minimizes the trace of the variance of the estimating function; cheaper.
    Mvc,
}

impl Criterion {
    pub fn label(self) -> &'static str {
        match self {
            Criterion::Uniform => "UNIF",
            Criterion::Mv => "MV",
            Criterion::Mvc => "MVc",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Uniform => "uniform",
            Criterion::Mv => "mv",
            Criterion::Mvc => "mvc",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" | "unif" => Ok(Criterion::Uniform),
            "mv" => Ok(Criterion::Mv),
            "mvc" => Ok(Criterion::Mvc),
            other => Err(Error::Config(format!(
                "unknown criterion {other:?} (expected uniform, mv or mvc)"
            ))),
        }
    }
}

/// How the cap `M` on the scores is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// No cap.
    #[default]
    #[serde(rename = "inf")]
    Infinite,
    /// Empirical `1 - r/(2n)` quantile of the pilot scores.
    Quantile,
    /// Exact water-filling threshold over full-data scores computed with the pilot estimate.
    Exact,
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMode::Infinite => "inf",
            ThresholdMode::Quantile => "quantile",
            ThresholdMode::Exact => "exact",
        })
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inf" | "infinite" | "infinity" => Ok(ThresholdMode::Infinite),
            "quantile" | "q" => Ok(ThresholdMode::Quantile),
            "exact" | "e" => Ok(ThresholdMode::Exact),
            other => Err(Error::Config(format!(
                "unknown threshold mode {other:?} (expected inf, quantile or exact)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub criterion: Criterion,
    /// Expected second-stage subsample size `r`.
    pub expected_size: f64,
    /// Shrinkage weight toward uniform, in `[0, 1]`.
    pub shrinkage: f64,
    pub threshold_mode: ThresholdMode,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn new(criterion: Criterion, expected_size: f64, shrinkage: f64, seed: u64) -> Self {
        SamplingPlan {
            criterion,
            expected_size,
            shrinkage,
            threshold_mode: ThresholdMode::Infinite,
            seed,
        }
    }

    pub fn with_threshold(mut self, mode: ThresholdMode) -> Self {
        self.threshold_mode = mode;
        self
    }

    /// Checks the plan against a data set of `n` rows.
    pub fn validate(&self, n: u64) -> Result<()> {
        if !(self.expected_size > 0.0) || !self.expected_size.is_finite() {
            return Err(Error::Config(format!(
                "expected subsample size must be positive, got {}",
                self.expected_size
            )));
        }
        if self.expected_size >= n as f64 {
            return Err(Error::Config(format!(
                "expected subsample size {} must be below the number of rows {n}",
                self.expected_size
            )));
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return Err(Error::Config(format!(
                "shrinkage must lie in [0, 1], got {}",
                self.shrinkage
            )));
        }
        Ok(())
    }
}

/// `|y - psi(beta' x)| * ||x||`.
pub fn score_mvc(x: &[f64], y: f64, family: LinkFamily, beta: &[f64]) -> f64 {
    (y - family.mean_unchecked(dot(beta, x))).abs() * dot(x, x).sqrt()
}

/// `|y - psi(beta' x)| * ||sigma_inv x||`.
pub fn score_mv(
    x: &[f64],
    y: f64,
    family: LinkFamily,
    beta: &[f64],
    sigma_inv: &DMatrix<f64>,
) -> Result<f64> {
    if sigma_inv.nrows() != x.len() || sigma_inv.ncols() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: sigma_inv.nrows(),
        });
    }
    let v = sigma_inv * DVector::from_column_slice(x);
    Ok((y - family.mean_unchecked(dot(beta, x))).abs() * v.norm())
}

/// Evaluates `||Sigma^-1 x||` with one forward substitution per record.
///
/// With `G G' = Sigma^2`, `||Sigma^-1 x||^2 = x' Sigma^-2 x = ||G^-1 x||^2`.
#[derive(Debug, Clone)]
pub struct MvNorm {
    /// Lower Cholesky factor of `Sigma^2`, row-major for the substitution loop.
    lower: Vec<f64>,
    d: usize,
}

impl MvNorm {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        let d = sigma.nrows();
        let sq = linalg::symmetrize(sigma * sigma);
        let rcond = linalg::reciprocal_condition(&sq);
        let chol = sq.cholesky().ok_or(Error::SingularHessian { rcond })?;
        let l = chol.l();
        let mut lower = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                lower[i * d + j] = l[(i, j)];
            }
        }
        Ok(MvNorm { lower, d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// `||Sigma^-1 x||`; `scratch` must have length `d`.
    #[inline]
    pub fn norm(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.d;
        let mut ss = 0.0;
        for i in 0..d {
            let row = &self.lower[i * d..i * d + i];
            let z = (x[i] - dot(row, &scratch[..i])) / self.lower[i * d + i];
            scratch[i] = z;
            ss += z * z;
        }
        ss.sqrt()
    }
}

/// Result of capping the scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waterfill {
    /// Cap `M` applied to the scores.
    pub threshold: f64,
    /// Number of records whose probability is exactly 1.
    pub capped: usize,
}

/// Finds the smallest `k` such that `(r - k) h_(N-k) < sum_{i <= N-k} h_(i)` and
/// `M = sum_{i <= N-k} h_(i) / (r - k)`, where `h_(1) <= ... <= h_(N)`.
///
/// Only the largest `ceil(r) + 1` scores are sorted.
pub fn waterfill(scores: &[f64], r: f64) -> Result<Waterfill> {
    let n = scores.len();
    if !(r > 0.0) || r >= n as f64 {
        return Err(Error::Config(format!(
            "expected size {r} must lie in (0, {n}) for {n} scores"
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(Error::DegenerateScores(format!(
            "score {bad} is not a finite nonnegative value"
        )));
    }
    let need = r.ceil() as usize;
    let positive = scores.iter().filter(|&&s| s > 0.0).count();
    if positive < need {
        return Err(Error::DegenerateScores(format!(
            "{positive} positive scores but expected size {r} needs at least {need}"
        )));
    }

    let top_len = (need + 1).min(n);
    let mut top = scores.to_vec();
    let desc = |a: &f64, b: &f64| b.partial_cmp(a).unwrap_or(Ordering::Equal);
    if top_len < n {
        top.select_nth_unstable_by(top_len - 1, desc);
        top.truncate(top_len);
    }
    top.sort_unstable_by(desc);

    let total: f64 = scores.iter().sum();
    let mut rest = total;
    // s counts capped candidates; top[s] is h_(N-s).
    let mut s = 0usize;
    while (s as f64) < r && s < top.len() {
        if (r - s as f64) * top[s] < rest {
            return Ok(Waterfill {
                threshold: rest / (r - s as f64),
                capped: s,
            });
        }
        rest -= top[s];
        s += 1;
    }
    Err(Error::DegenerateScores(format!(
        "no cap satisfies the allocation constraints for expected size {r}"
    )))
}

/// `p_i = r (h_i ∧ M) / sum_j (h_j ∧ M)`; entries that reach 1 are set to exactly 1.
pub fn optimal_probabilities(scores: &[f64], r: f64, threshold: f64) -> Result<Vec<f64>> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    let total: f64 = scores.iter().map(|&h| h.min(threshold)).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateScores("all scores are zero".into()));
    }
    let scale = r / total;
    Ok(scores
        .iter()
        .map(|&h| {
            let p = h.min(threshold) * scale;
            if p >= 1.0 - 1e-12 {
                1.0
            } else {
                p
            }
        })
        .collect())
}

/// Shrinkage probability `(1 - rho) r s / (n psi_hat) + rho r / n`, uncapped.
///
/// `score` is the (possibly capped) score of the record.
#[inline]
pub fn shrinkage_probability(score: f64, psi_hat: f64, n: f64, r: f64, rho: f64) -> f64 {
    (1.0 - rho) * (r * score / (n * psi_hat)) + rho * (r / n)
}

/// Empirical quantile at `level` with the midpoint convention at exact order statistics.
pub fn empirical_quantile(values: &[f64], level: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut v = values.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let m = v.len();
    if level >= 1.0 {
        return Ok(v[m - 1]);
    }
    if level <= 0.0 {
        return Ok(v[0]);
    }
    let h = level * m as f64;
    let f = h.floor();
    if h == f {
        let i = f as usize;
        Ok(0.5 * (v[i - 1] + v[i.min(m - 1)]))
    } else {
        Ok(v[(h.ceil() as usize).min(m) - 1])
    }
}

/// Cap estimated as the `1 - r/(2n)` quantile of pilot scores.
pub fn threshold_quantile(pilot_scores: &[f64], r: f64, n: u64) -> Result<f64> {
    empirical_quantile(pilot_scores, 1.0 - r / (2.0 * n as f64))
}

/// Everything needed to turn a record into its second-stage inclusion probability.
#[derive(Debug, Clone)]
pub struct ScoreContext {
    pub criterion: Criterion,
    pub family: LinkFamily,
    pub beta0: Vec<f64>,
    pub mv: Option<MvNorm>,
    pub psi_hat: f64,
    /// Rows of the data being sampled.
    pub n: f64,
    pub r: f64,
    pub rho: f64,
    /// Cap on the scores (`+inf` for none).
    pub threshold: f64,
}

impl ScoreContext {
    pub fn uniform(n: f64, r: f64) -> Self {
        ScoreContext {
            criterion: Criterion::Uniform,
            family: LinkFamily::Identity,
            beta0: Vec::new(),
            mv: None,
            psi_hat: 1.0,
            n,
            r,
            rho: 1.0,
            threshold: f64::INFINITY,
        }
    }

    pub fn scratch(&self) -> Vec<f64> {
        vec![0.0; self.beta0.len()]
    }

    /// Uncapped score of one record under the context's criterion.
    #[inline]
    pub fn raw_score(&self, x: &[f64], y: f64, scratch: &mut [f64]) -> f64 {
        match self.criterion {
            Criterion::Uniform => 1.0,
            Criterion::Mvc => score_mvc(x, y, self.family, &self.beta0),
            Criterion::Mv => {
                let resid = (y - self.family.mean_unchecked(dot(&self.beta0, x))).abs();
                let mv = self
                    .mv
                    .as_ref()
                    .expect("MV criterion requires a Sigma factor");
                resid * mv.norm(x, scratch)
            }
        }
    }

    /// Inclusion probability, capped at 1.
    #[inline]
    pub fn probability(&self, x: &[f64], y: f64, scratch: &mut [f64]) -> f64 {
        let p = match self.criterion {
            Criterion::Uniform => self.r / self.n,
            _ => {
                let s = self.raw_score(x, y, scratch).min(self.threshold);
                shrinkage_probability(s, self.psi_hat, self.n, self.r, self.rho)
            }
        };
        p.min(1.0)
    }
}

/// Summary of one streaming Poisson draw.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DrawStats {
    pub rows: u64,
    /// `sum_i p_i`, the expected sample size.
    pub expected_size: f64,
    /// Records with probability exactly 0 (never sampled).
    pub zero_probability: u64,
    pub capped: u64,
}

/// Scans `source` once and keeps record `i` when `uniform(seed, stream, i) < p_i`.
pub fn poisson_draw<F>(
    source: &dyn RecordSource,
    seed: u64,
    stream: Stream,
    mut prob: F,
) -> Result<(Vec<WeightedObservation>, DrawStats)>
where
    F: FnMut(&[f64], f64) -> f64,
{
    let mut out = Vec::new();
    let mut stats = DrawStats::default();
    source.scan(&mut |rec| {
        let p = prob(rec.x, rec.y);
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::ProbabilityOutOfRange {
                index: rec.index,
                p,
            });
        }
        stats.rows += 1;
        stats.expected_size += p;
        if p == 0.0 {
            stats.zero_probability += 1;
            return Ok(());
        }
        if p == 1.0 {
            stats.capped += 1;
        }
        if rng::include(seed, stream, rec.index, p) {
            out.push(WeightedObservation {
                index: rec.index,
                x: rec.x.to_vec(),
                y: rec.y,
                p,
            });
        }
        Ok(())
    })?;
    Ok((out, stats))
}
