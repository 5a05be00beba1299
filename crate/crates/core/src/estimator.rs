//! Weighted quasi-likelihood estimation on a subsample.
//!
//! The subsample estimating equation is
//!
//! ```text
//! Q*(beta) = sum_S (1 / p_i) (y_i - psi(beta' x_i)) x_i = 0
//! ```
//!
//! solved by Newton-Raphson with step halving. The Newton matrix is kept in
//! its positive definite form `sum_S (1 / p_i) psi'(beta' x_i) x_i x_i'`,
//! i.e. the negative of the Jacobian of `Q*`.
//!
//! Sign and scale convention: [`FitResult::hessian`] and
//! [`subsample_hessian`] are that positive definite matrix divided by the
//! number of full-data rows it represents, so both approximate
//! `Sigma_psi(beta) = N^-1 sum psi'(beta' x) x x'`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Dataset, RecordSource};
use crate::linalg::{self, add_outer_lower, dot, fill_upper};
use crate::model::LinkFamily;

/// One sampled record together with the probability it was drawn with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedObservation {
    /// Global record index (0 when the record did not come from a stream).
    pub index: u64,
    pub x: Vec<f64>,
    pub y: f64,
    /// Inclusion probability, in (0, 1].
    pub p: f64,
}

impl WeightedObservation {
    pub fn new(x: Vec<f64>, y: f64, p: f64) -> Self {
        WeightedObservation { index: 0, x, y, p }
    }

    #[inline]
    pub fn weight(&self) -> f64 {
        1.0 / self.p
    }
}

/// A subsample whose inverse-probability weights are all multiplied by `scale`.
#[derive(Debug, Clone, Copy)]
pub struct SampleGroup<'a> {
    pub obs: &'a [WeightedObservation],
    pub scale: f64,
}

impl<'a> SampleGroup<'a> {
    pub fn unit(obs: &'a [WeightedObservation]) -> Self {
        SampleGroup { obs, scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when `max |Q*| / n_hat <= tol`, where `n_hat` is the weighted record count.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Added to the normalized Newton matrix as `ridge * I`.
    pub ridge: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 30,
            ridge: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: DVector<f64>,
    /// Normalized positive definite Newton matrix at `beta` (see module docs).
    pub hessian: DMatrix<f64>,
    /// Estimated covariance of `beta` around the full-data estimate, when computed.
    pub variance: Option<DMatrix<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Realized number of sampled records used in the fit.
    pub subsample_size: usize,
    /// Final `max |Q*| / n_hat`.
    pub score_norm: f64,
}

impl FitResult {
    pub fn std_errors(&self) -> Option<Vec<f64>> {
        self.variance
            .as_ref()
            .map(|v| (0..v.nrows()).map(|k| v[(k, k)].max(0.0).sqrt()).collect())
    }
}

/// Score and Newton matrix of an estimating equation at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub score: DVector<f64>,
    pub newton_matrix: DMatrix<f64>,
    pub saturated: bool,
}

/// Anything Newton-Raphson can be run on.
pub trait EstimatingEquation {
    fn dim(&self) -> usize;
    /// Normalizer for the stopping rule (number of full-data rows represented).
    fn scale(&self) -> f64;
    fn evaluate(&self, beta: &DVector<f64>) -> Result<Evaluation>;
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub beta: DVector<f64>,
    pub newton_matrix: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub score_norm: f64,
}

pub fn newton<E: EstimatingEquation + ?Sized>(
    eq: &E,
    init: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<NewtonOutcome> {
    if init.len() != eq.dim() {
        return Err(Error::DimensionMismatch {
            expected: eq.dim(),
            found: init.len(),
        });
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("initial value must be finite".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    let scale = eq.scale();
    let ridge = opts.ridge * scale;
    let mut beta = init.clone();
    let mut ev = eq.evaluate(&beta)?;
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let norm = ev.score.amax() / scale;
        if norm <= opts.tol && !ev.saturated {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        let mut m = ev.newton_matrix.clone();
        if ridge > 0.0 {
            for k in 0..m.nrows() {
                m[(k, k)] += ridge;
            }
        }
        let step = linalg::spd_solve(&m, &ev.score)?;
        let current = ev.score.norm();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &beta + &step * t;
            let cand_ev = eq.evaluate(&cand)?;
            if !cand_ev.saturated && cand_ev.score.norm() < current {
                accepted = Some((cand, cand_ev));
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((b, e)) => {
                beta = b;
                ev = e;
            }
            None => break,
        }
    }
    let score_norm = ev.score.amax() / scale;
    Ok(NewtonOutcome {
        beta,
        newton_matrix: ev.newton_matrix,
        iterations,
        converged,
        score_norm,
    })
}

/// Weighted estimating equation over one or more sample groups.
pub struct WeightedEquation<'a> {
    groups: &'a [SampleGroup<'a>],
    family: LinkFamily,
    dim: usize,
    scale: f64,
}

impl<'a> WeightedEquation<'a> {
    pub fn new(groups: &'a [SampleGroup<'a>], family: LinkFamily) -> Result<Self> {
        let dim = validate_groups(groups)?;
        let scale = groups
            .iter()
            .map(|g| g.scale * g.obs.iter().map(WeightedObservation::weight).sum::<f64>())
            .sum();
        Ok(WeightedEquation {
            groups,
            family,
            dim,
            scale,
        })
    }
}

fn validate_groups(groups: &[SampleGroup<'_>]) -> Result<usize> {
    let dim = groups
        .iter()
        .flat_map(|g| g.obs.first())
        .map(|o| o.x.len())
        .next()
        .ok_or(Error::EmptySample)?;
    for g in groups {
        if !(g.scale > 0.0) || !g.scale.is_finite() {
            return Err(Error::Config(format!(
                "group scale {} must be positive",
                g.scale
            )));
        }
        for o in g.obs {
            if o.x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: o.x.len(),
                });
            }
            if !(o.p > 0.0 && o.p <= 1.0) {
                return Err(Error::ProbabilityOutOfRange {
                    index: o.index,
                    p: o.p,
                });
            }
        }
    }
    Ok(dim)
}

impl EstimatingEquation for WeightedEquation<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn scale(&self) -> f64 {
        self.scale
    }

    fn evaluate(&self, beta: &DVector<f64>) -> Result<Evaluation> {
        let d = self.dim;
        let b = beta.as_slice();
        let mut score = DVector::zeros(d);
        let mut m = DMatrix::zeros(d, d);
        let mut saturated = false;
        for g in self.groups {
            for o in g.obs {
                let w = g.scale / o.p;
                let e = self.family.eval(dot(b, &o.x));
                saturated |= e.saturated;
                let r = w * (o.y - e.mean);
                for (s, xv) in score.iter_mut().zip(&o.x) {
                    *s += r * xv;
                }
                add_outer_lower(&mut m, &o.x, w * e.derivative);
            }
        }
        fill_upper(&mut m);
        Ok(Evaluation {
            score,
            newton_matrix: m,
            saturated,
        })
    }
}

/// Unweighted full-data estimating equation, streamed from a source.
pub struct SourceEquation<'a> {
    source: &'a dyn RecordSource,
    family: LinkFamily,
    rows: f64,
}

impl<'a> SourceEquation<'a> {
    pub fn new(source: &'a dyn RecordSource, family: LinkFamily) -> Result<Self> {
        let rows = source.count()?;
        if rows == 0 {
            return Err(Error::EmptySample);
        }
        Ok(SourceEquation {
            source,
            family,
            rows: rows as f64,
        })
    }
}

impl EstimatingEquation for SourceEquation<'_> {
    fn dim(&self) -> usize {
        self.source.dim()
    }

    fn scale(&self) -> f64 {
        self.rows
    }

    fn evaluate(&self, beta: &DVector<f64>) -> Result<Evaluation> {
        let d = self.dim();
        let b = beta.as_slice();
        let mut score = DVector::zeros(d);
        let mut m = DMatrix::zeros(d, d);
        let mut saturated = false;
        let family = self.family;
        self.source.scan(&mut |rec| {
            let e = family.eval(dot(b, rec.x));
            saturated |= e.saturated;
            let r = rec.y - e.mean;
            for (s, xv) in score.iter_mut().zip(rec.x) {
                *s += r * xv;
            }
            add_outer_lower(&mut m, rec.x, e.derivative);
            Ok(())
        })?;
        fill_upper(&mut m);
        Ok(Evaluation {
            score,
            newton_matrix: m,
            saturated,
        })
    }
}

fn fit_from_outcome(out: NewtonOutcome, scale: f64, subsample_size: usize) -> FitResult {
    FitResult {
        hessian: linalg::symmetrize(out.newton_matrix / scale),
        beta: out.beta,
        variance: None,
        iterations: out.iterations,
        converged: out.converged,
        subsample_size,
        score_norm: out.score_norm,
    }
}

/// Solves the weighted estimating equation on one subsample.
pub fn solve_weighted_qle(
    sample: &[WeightedObservation],
    family: LinkFamily,
    init: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<FitResult> {
    solve_groups(&[SampleGroup::unit(sample)], family, init, opts)
}

/// Solves the pooled equation over several groups with their own weight scales.
pub fn solve_groups(
    groups: &[SampleGroup<'_>],
    family: LinkFamily,
    init: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<FitResult> {
    // Accumulate in global index order so the result does not depend on how
    // the caller happened to collect the records.
    let sorted: Vec<Option<Vec<WeightedObservation>>> = groups
        .iter()
        .map(|g| {
            (!g.obs.is_sorted_by_key(|o| o.index)).then(|| {
                let mut v = g.obs.to_vec();
                v.sort_by_key(|o| o.index);
                v
            })
        })
        .collect();
    let ordered: Vec<SampleGroup<'_>> = groups
        .iter()
        .zip(&sorted)
        .map(|(g, s)| SampleGroup {
            obs: s.as_deref().unwrap_or(g.obs),
            scale: g.scale,
        })
        .collect();
    let eq = WeightedEquation::new(&ordered, family)?;
    let out = newton(&eq, init, opts)?;
    let size = groups.iter().map(|g| g.obs.len()).sum();
    Ok(fit_from_outcome(out, eq.scale(), size))
}

/// Full-data quasi-likelihood estimate, streaming the source once per Newton step.
pub fn full_data_qle(
    source: &dyn RecordSource,
    family: LinkFamily,
    init: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<FitResult> {
    let eq = SourceEquation::new(source, family)?;
    let out = newton(&eq, init, opts)?;
    let n = eq.scale();
    Ok(fit_from_outcome(out, n, n as usize))
}

/// `Q*(beta) = sum_S (1 / p_i) (y_i - psi(beta' x_i)) x_i`.
pub fn weighted_score(
    sample: &[WeightedObservation],
    family: LinkFamily,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let groups = [SampleGroup::unit(sample)];
    let eq = WeightedEquation::new(&groups, family)?;
    check_dim(eq.dim, beta.len())?;
    Ok(eq.evaluate(beta)?.score)
}

/// `n^-1 sum_S (1 / p_i) psi'(beta' x_i) x_i x_i'` (positive semidefinite form).
pub fn subsample_hessian(
    sample: &[WeightedObservation],
    family: LinkFamily,
    beta: &DVector<f64>,
    n: u64,
) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::Config("hessian scale must be at least 1".into()));
    }
    Ok(weighted_hessian_sum(&[SampleGroup::unit(sample)], family, beta)? / n as f64)
}

/// `sum_g scale_g sum_S (1 / p_i) psi'(beta' x_i) x_i x_i'`, un-normalized.
pub fn weighted_hessian_sum(
    groups: &[SampleGroup<'_>],
    family: LinkFamily,
    beta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let dim = validate_groups(groups)?;
    check_dim(dim, beta.len())?;
    let b = beta.as_slice();
    let mut m = DMatrix::zeros(dim, dim);
    for g in groups {
        for o in g.obs {
            let w = g.scale / o.p;
            add_outer_lower(&mut m, &o.x, w * family.eval(dot(b, &o.x)).derivative);
        }
    }
    fill_upper(&mut m);
    Ok(m)
}

/// Poisson-sampling variance piece `sum_S (1 - p_i) / p_i^2 (y_i - psi)^2 x_i x_i'`.
///
/// Un-normalized; records drawn with certainty contribute nothing.
pub fn variance_contribution(
    sample: &[WeightedObservation],
    family: LinkFamily,
    beta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if sample.is_empty() {
        return Ok(DMatrix::zeros(beta.len(), beta.len()));
    }
    let dim = validate_groups(&[SampleGroup::unit(sample)])?;
    check_dim(dim, beta.len())?;
    let b = beta.as_slice();
    let mut m = DMatrix::zeros(dim, dim);
    for o in sample {
        let resid = o.y - family.mean_unchecked(dot(b, &o.x));
        let w = (1.0 - o.p) / (o.p * o.p) * resid * resid;
        add_outer_lower(&mut m, &o.x, w);
    }
    fill_upper(&mut m);
    Ok(m)
}

/// One partition's input to [`sandwich_variance`].
#[derive(Debug, Clone, Copy)]
pub struct VariancePart<'a> {
    pub sample: &'a [WeightedObservation],
    /// Estimate at which residuals are evaluated (the partition's own fit).
    pub beta: &'a DVector<f64>,
    /// Multiplier applied to this part's inverse-probability weights.
    pub scale: f64,
}

/// `V = H^-1 V_c H^-1` with `V_c = N^-2 sum_parts scale^2 sum_S (y - psi)^2 x x' (1 - p) / p^2`
/// and `H` the pooled, `N`-normalized Newton matrix.
pub fn sandwich_variance(
    parts: &[VariancePart<'_>],
    family: LinkFamily,
    pooled_hessian: &DMatrix<f64>,
    n: u64,
) -> Result<DMatrix<f64>> {
    let d = pooled_hessian.nrows();
    let mut meat = DMatrix::zeros(d, d);
    for part in parts {
        meat += variance_contribution(part.sample, family, part.beta)? * (part.scale * part.scale);
    }
    let nf = n as f64;
    linalg::sandwich(pooled_hessian, &(meat / (nf * nf)))
}

/// Asymptotic covariance of the subsample estimator for given inclusion
/// probabilities, evaluated on the full data:
/// `V = Sigma^-1 V_c Sigma^-1`,
/// `V_c = N^-2 sum (y - psi)^2 x x' / p - N^-2 sum (y - psi)^2 x x'`.
pub fn asymptotic_variance(
    data: &Dataset,
    family: LinkFamily,
    beta: &DVector<f64>,
    probabilities: &[f64],
) -> Result<DMatrix<f64>> {
    let d = data.dim();
    check_dim(d, beta.len())?;
    if probabilities.len() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            found: probabilities.len(),
        });
    }
    let b = beta.as_slice();
    let mut sigma = DMatrix::zeros(d, d);
    let mut vc = DMatrix::zeros(d, d);
    for ((i, (x, y)), &p) in data.rows().enumerate().zip(probabilities) {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::ProbabilityOutOfRange { index: i as u64, p });
        }
        let e = family.eval(dot(b, x));
        let r2 = (y - e.mean).powi(2);
        add_outer_lower(&mut sigma, x, e.derivative);
        add_outer_lower(&mut vc, x, r2 / p - r2);
    }
    fill_upper(&mut sigma);
    fill_upper(&mut vc);
    let nf = data.len() as f64;
    linalg::sandwich(&(sigma / nf), &(vc / (nf * nf)))
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs(x: &[f64], y: f64, p: f64) -> WeightedObservation {
        WeightedObservation::new(x.to_vec(), y, p)
    }

    fn random_sample(
        rng: &mut ChaCha8Rng,
        n: usize,
        d: usize,
        family: LinkFamily,
    ) -> Vec<WeightedObservation> {
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let eta: f64 = x.iter().sum::<f64>() * 0.3;
                let y = match family {
                    LinkFamily::Identity => eta + rng.random_range(-1.0..1.0),
                    LinkFamily::Exp => (eta.exp() * rng.random_range(0.0..2.0)).round(),
                    LinkFamily::Logistic => f64::from(rng.random_bool(1.0 / (1.0 + (-eta).exp()))),
                };
                obs(&x, y, rng.random_range(0.05..1.0))
            })
            .collect()
    }

    #[test]
    fn intercept_only_exp_fit_is_log_mean() {
        let s = vec![obs(&[1.0], 2.0, 1.0), obs(&[1.0], 4.0, 1.0)];
        let fit = solve_weighted_qle(
            &s,
            LinkFamily::Exp,
            &DVector::zeros(1),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.beta[0], 3f64.ln(), epsilon = 1e-10);
        let score = weighted_score(&s, LinkFamily::Exp, &fit.beta).unwrap();
        assert!(score.amax() <= 1e-8 * 2.0);
    }

    #[test]
    fn identity_family_is_weighted_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = random_sample(&mut rng, 40, 3, LinkFamily::Identity);
            let fit = solve_weighted_qle(
                &s,
                LinkFamily::Identity,
                &DVector::zeros(3),
                &SolverOptions::default(),
            )
            .unwrap();
            // (X'WX)^-1 X'Wy, assembled independently.
            let mut xtwx = DMatrix::<f64>::zeros(3, 3);
            let mut xtwy = DVector::<f64>::zeros(3);
            for o in &s {
                let x = DVector::from_column_slice(&o.x);
                xtwx += &x * x.transpose() / o.p;
                xtwy += &x * (o.y / o.p);
            }
            let closed = xtwx.lu().solve(&xtwy).unwrap();
            assert!((fit.beta - closed).amax() < 1e-10);
        }
    }

    #[test]
    fn score_direct_arithmetic() {
        let s = vec![obs(&[2.0], 5.0, 0.5)];
        let q = weighted_score(&s, LinkFamily::Identity, &DVector::from_vec(vec![1.0])).unwrap();
        assert_eq!(q[0], 12.0);
    }

    #[test]
    fn hessian_examples() {
        let s = vec![obs(&[1.0, 0.0], 3.0, 0.5), obs(&[0.0, 1.0], -1.0, 0.5)];
        let h = subsample_hessian(&s, LinkFamily::Identity, &DVector::zeros(2), 2).unwrap();
        assert_eq!(h, DMatrix::identity(2, 2));
        let he = subsample_hessian(&s, LinkFamily::Exp, &DVector::zeros(2), 2).unwrap();
        assert_eq!(he, h);
    }

    #[test]
    fn sandwich_examples() {
        let s = vec![obs(&[1.0], 2.0, 0.5)];
        let beta = DVector::from_vec(vec![0.0]);
        let v = sandwich_variance(
            &[VariancePart {
                sample: &s,
                beta: &beta,
                scale: 1.0,
            }],
            LinkFamily::Identity,
            &DMatrix::identity(1, 1),
            1,
        )
        .unwrap();
        assert_abs_diff_eq!(v[(0, 0)], 8.0, epsilon = 1e-12);

        let certain = vec![obs(&[1.0, 0.3], 2.0, 1.0), obs(&[0.2, 1.0], -1.0, 1.0)];
        let beta = DVector::zeros(2);
        let v = sandwich_variance(
            &[VariancePart {
                sample: &certain,
                beta: &beta,
                scale: 1.0,
            }],
            LinkFamily::Identity,
            &DMatrix::identity(2, 2),
            2,
        )
        .unwrap();
        assert!(v.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn empty_sample_and_bad_probabilities() {
        assert!(matches!(
            solve_weighted_qle(
                &[],
                LinkFamily::Exp,
                &DVector::zeros(1),
                &SolverOptions::default()
            ),
            Err(Error::EmptySample)
        ));
        let bad = vec![obs(&[1.0], 1.0, 0.0)];
        assert!(matches!(
            weighted_score(&bad, LinkFamily::Exp, &DVector::zeros(1)),
            Err(Error::ProbabilityOutOfRange { .. })
        ));
        let s = vec![obs(&[1.0, 2.0], 1.0, 1.0)];
        assert!(matches!(
            weighted_score(&s, LinkFamily::Exp, &DVector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn collinear_sample_is_singular() {
        let s = vec![obs(&[1.0, 2.0], 1.0, 1.0), obs(&[2.0, 4.0], 3.0, 1.0)];
        let err = solve_weighted_qle(
            &s,
            LinkFamily::Identity,
            &DVector::zeros(2),
            &SolverOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SingularHessian { rcond } if rcond < 1e-12));
        let ridge = SolverOptions {
            ridge: 1e-3,
            ..SolverOptions::default()
        };
        // A ridge makes the system solvable; the equation itself has many roots.
        let fit = solve_weighted_qle(&s, LinkFamily::Identity, &DVector::zeros(2), &ridge).unwrap();
        assert!(fit.beta.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn non_convergence_is_reported_not_raised() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_sample(&mut rng, 50, 2, LinkFamily::Exp);
        let opts = SolverOptions {
            max_iter: 1,
            tol: 1e-14,
            ..SolverOptions::default()
        };
        let fit = solve_weighted_qle(&s, LinkFamily::Exp, &DVector::zeros(2), &opts).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 1);
    }

    #[test]
    fn newton_matrix_matches_finite_difference_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for family in [LinkFamily::Identity, LinkFamily::Exp, LinkFamily::Logistic] {
            for _ in 0..10 {
                let s = random_sample(&mut rng, 15, 3, family);
                let beta = DVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5));
                let groups = [SampleGroup::unit(&s)];
                let eq = WeightedEquation::new(&groups, family).unwrap();
                let m = eq.evaluate(&beta).unwrap().newton_matrix;
                let h = 1e-6;
                for j in 0..3 {
                    let mut bp = beta.clone();
                    let mut bm = beta.clone();
                    bp[j] += h;
                    bm[j] -= h;
                    let col = (weighted_score(&s, family, &bp).unwrap()
                        - weighted_score(&s, family, &bm).unwrap())
                        / (2.0 * h);
                    for i in 0..3 {
                        let rel = (-col[i] - m[(i, j)]).abs() / m.amax();
                        assert!(rel < 1e-5, "{family}: ({i},{j}) rel {rel}");
                    }
                }
            }
        }
    }

    #[test]
    fn probability_rescaling_leaves_the_root_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_sample(&mut rng, 60, 3, LinkFamily::Exp);
        let opts = SolverOptions::default();
        let a = solve_weighted_qle(&s, LinkFamily::Exp, &DVector::zeros(3), &opts).unwrap();
        let scaled: Vec<_> = s.iter().map(|o| obs(&o.x, o.y, o.p * 0.5)).collect();
        let b = solve_weighted_qle(&scaled, LinkFamily::Exp, &DVector::zeros(3), &opts).unwrap();
        assert!((a.beta - b.beta).amax() <= 1e-8);
    }

    #[test]
    fn asymptotic_variance_vanishes_under_full_inclusion() {
        let data = Dataset::from_rows((0..30).map(|i| {
            let t = i as f64 / 30.0;
            (vec![1.0, t], (1.0 + 2.0 * t + (i % 3) as f64).round())
        }))
        .unwrap();
        let beta = DVector::from_vec(vec![0.5, 0.5]);
        let v = asymptotic_variance(&data, LinkFamily::Exp, &beta, &vec![1.0; 30]).unwrap();
        assert!(v.amax() < 1e-15);
    }

    #[test]
    fn asymptotic_variance_two_point_scalar_check() {
        // N = 2, d = 1, identity family at beta = 0:
        // Sigma = (x1^2 + x2^2) / 2, V_c = [r1^2 x1^2 (1/p1 - 1) + r2^2 x2^2 (1/p2 - 1)] / 4.
        let data = Dataset::from_rows(vec![(vec![1.0], 2.0), (vec![3.0], -1.0)]).unwrap();
        let (p1, p2) = (0.25, 0.8);
        let sigma = (1.0 + 9.0) / 2.0;
        let vc = (4.0 * 1.0 * (1.0 / p1 - 1.0) + 1.0 * 9.0 * (1.0 / p2 - 1.0)) / 4.0;
        let expected = vc / (sigma * sigma);
        let v = asymptotic_variance(&data, LinkFamily::Identity, &DVector::zeros(1), &[p1, p2])
            .unwrap();
        assert_abs_diff_eq!(v[(0, 0)], expected, epsilon = 1e-14);
    }

    proptest::proptest! {
        #[test]
        fn hessian_symmetric_psd(seed in 0u64..1000, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_sample(&mut rng, n, 4, LinkFamily::Logistic);
            let beta = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let h = subsample_hessian(&s, LinkFamily::Logistic, &beta, 10).unwrap();
            proptest::prop_assert_eq!(&h, &h.transpose());
            let eig = h.clone().symmetric_eigenvalues();
            proptest::prop_assert!(eig.min() >= -1e-10 * h.trace().abs());
        }

        #[test]
        fn sandwich_symmetric_psd(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_sample(&mut rng, 20, 3, LinkFamily::Exp);
            let beta = DVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5));
            let h = subsample_hessian(&s, LinkFamily::Exp, &beta, 20).unwrap();
            let v = sandwich_variance(&[VariancePart { sample: &s, beta: &beta, scale: 1.0 }], LinkFamily::Exp, &h, 20).unwrap();
            proptest::prop_assert!((&v - v.transpose()).amax() <= 1e-12 * v.amax().max(1e-300));
            let eig = v.clone().symmetric_eigenvalues();
            proptest::prop_assert!(eig.min() >= -1e-9 * v.trace().abs());
        }
    }
}
