//! Synthetic Poisson regression data and replication studies.
//!
//! Main cases C1-C4 have seven uniform-type covariates; supplementary cases
//! S1-S5 use normal or scaled-t covariates, with S4 and S5 in 35 and 140
//! dimensions. Responses are `y | x ~ Poisson(exp(beta' x))`.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::distributed::run_distributed;
use crate::error::{Error, Result};
use crate::estimator::{full_data_qle, SolverOptions};
use crate::ingest::{partition_view, Dataset, RecordSource};
use crate::model::{LinkFamily, EXP_CLAMP};
use crate::pipeline::run_two_step;
use crate::rng::derive_seed;
use crate::sampling::{Criterion, SamplingPlan, ThresholdMode};

/// Rows per data set unless a case size is given explicitly.
pub const DESK_N: u64 = 50_000;
/// Number of files the S5 layout is written as.
pub const S5_FILES: usize = 5;
/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963985;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseId {
    C1,
    C2,
    C3,
    C4,
    S1,
    S2,
    S3,
    S4,
    S5,
}

impl CaseId {
    pub const ALL: [CaseId; 9] = [
        CaseId::C1,
        CaseId::C2,
        CaseId::C3,
        CaseId::C4,
        CaseId::S1,
        CaseId::S2,
        CaseId::S3,
        CaseId::S4,
        CaseId::S5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CaseId::C1 => "c1",
            CaseId::C2 => "c2",
            CaseId::C3 => "c3",
            CaseId::C4 => "c4",
            CaseId::S1 => "s1",
            CaseId::S2 => "s2",
            CaseId::S3 => "s3",
            CaseId::S4 => "s4",
            CaseId::S5 => "s5",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            CaseId::S4 => 35,
            CaseId::S5 => 140,
            _ => 7,
        }
    }

    pub fn beta_true(self) -> Vec<f64> {
        let wide = |d: usize| {
            (0..d)
                .map(|j| match j {
                    0..=9 => 0.5,
                    30..=34 => -0.1,
                    10..=29 => 0.2,
                    _ => 0.0,
                })
                .collect()
        };
        match self {
            CaseId::S4 => wide(35),
            CaseId::S5 => wide(140),
            _ => vec![0.5; 7],
        }
    }

    pub fn covariate_law(self) -> &'static str {
        match self {
            CaseId::C1 => "x_j ~ U(0,1), j = 1..7",
            CaseId::C2 => "x_1 ~ U(0,1), x_2 = x_1 + e with e ~ U(0,1), others U(0,1)",
            CaseId::C3 => "x_1 ~ U(0,1), x_2 = x_1 + e with e ~ U(0,0.1), others U(0,1)",
            CaseId::C4 => "as c2 with x_6, x_7 ~ U(-1,1)",
            CaseId::S1 => "x ~ N(0.15, I_7)",
            CaseId::S2 => "x ~ N(0.15, S) with S_ij = 0.5^|i-j|, d = 7",
            CaseId::S3 => "x ~ t_9(0.15, I_7) / 10",
            CaseId::S4 => "x ~ N(mu, I_35), mu_j = 0.15 for j <= 7, else 0",
            CaseId::S5 => "x ~ N(mu, I_140), mu_j = 0.15 for j <= 7, else 0",
        }
    }

    /// Cases c1 to c4 measure error against the full-data estimate, s1 to s5 against the truth.
    pub fn default_reference(self) -> MseReference {
        match self {
            CaseId::C1 | CaseId::C2 | CaseId::C3 | CaseId::C4 => MseReference::FullQle,
            _ => MseReference::TrueBeta,
        }
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CaseId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.to_ascii_lowercase();
        let t = t
            .strip_prefix("case")
            .unwrap_or(&t)
            .trim_start_matches(['-', '_']);
        let id = match t {
            "1" | "c1" => CaseId::C1,
            "2" | "c2" => CaseId::C2,
            "3" | "c3" => CaseId::C3,
            "4" | "c4" => CaseId::C4,
            "s1" => CaseId::S1,
            "s2" => CaseId::S2,
            "s3" => CaseId::S3,
            "s4" => CaseId::S4,
            "s5" => CaseId::S5,
            _ => {
                return Err(Error::Config(format!(
                    "unknown case {s:?} (expected c1..c4 or s1..s5)"
                )))
            }
        };
        Ok(id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub case_id: CaseId,
    pub n: u64,
    pub seed: u64,
}

impl CaseSpec {
    pub fn new(case_id: CaseId, n: u64, seed: u64) -> Self {
        CaseSpec { case_id, n, seed }
    }

    pub fn dim(&self) -> usize {
        self.case_id.dim()
    }

    pub fn beta_true(&self) -> DVector<f64> {
        DVector::from_vec(self.case_id.beta_true())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < self.dim() as u64 {
            return Err(Error::Config(format!(
                "case {} needs at least {} rows, got {}",
                self.case_id,
                self.dim(),
                self.n
            )));
        }
        Ok(())
    }
}

/// Sequential row generator for one case.
pub struct CaseGenerator {
    case_id: CaseId,
    beta: Vec<f64>,
    rng: ChaCha8Rng,
    ar_factor: Option<DMatrix<f64>>,
    chi2: ChiSquared<f64>,
    remaining: u64,
    /// Rows redrawn because `exp(beta' x)` was not usable.
    pub redraws: u64,
}

impl CaseGenerator {
    pub fn new(spec: &CaseSpec) -> Result<Self> {
        spec.validate()?;
        let ar_factor = match spec.case_id {
            CaseId::S2 => {
                let d = spec.dim();
                let s = DMatrix::from_fn(d, d, |i, j| 0.5f64.powi((i as i32 - j as i32).abs()));
                Some(
                    s.cholesky()
                        .expect("AR(0.5) correlation is positive definite")
                        .l(),
                )
            }
            _ => None,
        };
        Ok(CaseGenerator {
            case_id: spec.case_id,
            beta: spec.case_id.beta_true(),
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            ar_factor,
            chi2: ChiSquared::new(9.0).expect("9 degrees of freedom"),
            remaining: spec.n,
            redraws: 0,
        })
    }

    fn covariates(&mut self, x: &mut [f64]) {
        let d = x.len();
        let rng = &mut self.rng;
        match self.case_id {
            CaseId::C1 => x.iter_mut().for_each(|v| *v = rng.random::<f64>()),
            CaseId::C2 | CaseId::C3 | CaseId::C4 => {
                let width = if self.case_id == CaseId::C3 { 0.1 } else { 1.0 };
                x[0] = rng.random::<f64>();
                x[1] = x[0] + width * rng.random::<f64>();
                for (j, v) in x.iter_mut().enumerate().skip(2) {
                    *v = if self.case_id == CaseId::C4 && j >= 5 {
                        rng.random_range(-1.0..1.0)
                    } else {
                        rng.random::<f64>()
                    };
                }
            }
            CaseId::S1 | CaseId::S4 | CaseId::S5 => {
                for (j, v) in x.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = if j < 7 { 0.15 + z } else { z };
                }
            }
            CaseId::S2 => {
                let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let l = self.ar_factor.as_ref().expect("factor built for S2");
                for i in 0..d {
                    x[i] = 0.15 + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>();
                }
            }
            CaseId::S3 => {
                let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let w: f64 = self.chi2.sample(rng);
                let s = (w / 9.0).sqrt();
                for (v, zi) in x.iter_mut().zip(&z) {
                    *v = (0.15 + zi / s) / 10.0;
                }
            }
        }
    }

    /// Writes the next row into `x` and returns its response, or `None` when done.
    pub fn next_row(&mut self, x: &mut [f64]) -> Option<f64> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        loop {
            self.covariates(x);
            let eta: f64 = x.iter().zip(&self.beta).map(|(a, b)| a * b).sum();
            if eta.is_finite() && eta <= EXP_CLAMP {
                if let Ok(pois) = Poisson::new(eta.exp()) {
                    return Some(pois.sample(&mut self.rng));
                }
            }
            self.redraws += 1;
        }
    }
}

/// Generates a case in memory. Returns the data and the number of redrawn rows.
pub fn generate_case(spec: &CaseSpec) -> Result<(Dataset, u64)> {
    let mut g = CaseGenerator::new(spec)?;
    let d = spec.dim();
    let n = spec.n as usize;
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    let mut row = vec![0.0; d];
    while let Some(y) = g.next_row(&mut row) {
        xs.extend_from_slice(&row);
        ys.push(y);
    }
    if g.redraws > 0 {
        warn!("case {}: {} rows redrawn", spec.case_id, g.redraws);
    }
    Ok((Dataset::new(d, xs, ys)?, g.redraws))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetadata {
    pub spec: CaseSpec,
    pub dim: usize,
    pub beta_true: Vec<f64>,
    pub covariate_law: String,
    pub response: String,
    pub layout: String,
    pub files: Vec<PathBuf>,
    pub rows_per_file: Vec<u64>,
    pub redraws: u64,
}

/// Writes a case as headerless CSV (`y, x_1, ..., x_d`) plus a JSON sidecar.
///
/// S5 is split into [`S5_FILES`] files; other cases are one file.
pub fn write_case(spec: &CaseSpec, dir: &Path) -> Result<CaseMetadata> {
    std::fs::create_dir_all(dir)?;
    let mut g = CaseGenerator::new(spec)?;
    let d = spec.dim();
    let parts = if spec.case_id == CaseId::S5 {
        S5_FILES.min(spec.n as usize)
    } else {
        1
    };
    let base = spec.n / parts as u64;
    let extra = spec.n % parts as u64;
    let mut files = Vec::with_capacity(parts);
    let mut rows_per_file = Vec::with_capacity(parts);
    let mut row = vec![0.0; d];
    let mut line = String::new();
    for part in 0..parts {
        let rows = base + u64::from((part as u64) < extra);
        let path = if parts == 1 {
            dir.join(format!("{}.csv", spec.case_id))
        } else {
            dir.join(format!("{}_part{}.csv", spec.case_id, part + 1))
        };
        let mut w = BufWriter::new(File::create(&path)?);
        for _ in 0..rows {
            let y = g
                .next_row(&mut row)
                .expect("generator yields exactly n rows");
            line.clear();
            use std::fmt::Write as _;
            write!(line, "{y}").expect("string write");
            for v in &row {
                write!(line, ",{v}").expect("string write");
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        w.flush()?;
        files.push(path);
        rows_per_file.push(rows);
    }
    let meta = CaseMetadata {
        spec: spec.clone(),
        dim: d,
        beta_true: spec.case_id.beta_true(),
        covariate_law: spec.case_id.covariate_law().to_string(),
        response: "y | x ~ Poisson(exp(beta' x))".to_string(),
        layout: "headerless csv: y, x_1, ..., x_d".to_string(),
        files,
        rows_per_file,
        redraws: g.redraws,
    };
    let sidecar = dir.join(format!("{}.json", spec.case_id));
    serde_json::to_writer_pretty(BufWriter::new(File::create(&sidecar)?), &meta)?;
    info!(
        "wrote case {} ({} rows) to {}",
        spec.case_id,
        spec.n,
        dir.display()
    );
    Ok(meta)
}

/// Unweighted full-data estimate from a zero start.
pub fn full_qle(source: &dyn RecordSource, family: LinkFamily) -> Result<DVector<f64>> {
    let fit = full_data_qle(
        source,
        family,
        &DVector::zeros(source.dim()),
        &SolverOptions::default(),
    )?;
    if !fit.converged {
        warn!(
            "full-data fit did not converge (score norm {:.3e})",
            fit.score_norm
        );
    }
    Ok(fit.beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MseReference {
    FullQle,
    TrueBeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentParams {
    pub family: LinkFamily,
    pub r: f64,
    pub r0: f64,
    pub rho: f64,
    /// Number of shards; 1 runs the single-machine two-step pipeline.
    pub k: usize,
    pub threshold: ThresholdMode,
    pub level: f64,
    /// Coefficient whose interval coverage is tracked (0-based).
    pub coverage_index: Option<usize>,
    pub seed: u64,
    pub solver: SolverOptions,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            family: LinkFamily::Exp,
            r: 1000.0,
            r0: 200.0,
            rho: 0.2,
            k: 1,
            threshold: ThresholdMode::Infinite,
            level: 0.95,
            coverage_index: Some(1),
            seed: 1,
            solver: SolverOptions::default(),
        }
    }
}

/// One subsampling estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    pub beta: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    pub subsample_size: usize,
    pub seconds: f64,
}

/// Runs one estimate with replication seed `seed`.
pub fn estimate_once(
    data: &Arc<Dataset>,
    method: Criterion,
    params: &ExperimentParams,
    seed: u64,
) -> Result<(Vec<f64>, Option<Vec<f64>>, usize)> {
    let plan =
        SamplingPlan::new(method, params.r, params.rho, seed).with_threshold(params.threshold);
    let fit = if params.k <= 1 {
        run_two_step(
            data.as_ref(),
            params.family,
            &plan,
            params.r0,
            &params.solver,
        )?
        .fit
    } else {
        let source: Arc<dyn RecordSource> = data.clone();
        let shards = partition_view(source, params.k)?;
        run_distributed(&shards, params.family, &plan, params.r0, &params.solver)?.fit
    };
    let se = fit.std_errors();
    Ok((fit.beta.as_slice().to_vec(), se, fit.subsample_size))
}

/// `t` replications of one method. Replication `i` uses seed `derive_seed(params.seed, i)`,
/// so different methods see common random numbers.
pub fn replicate(
    data: &Arc<Dataset>,
    method: Criterion,
    params: &ExperimentParams,
    t: usize,
) -> Vec<Result<Replicate>> {
    (0..t)
        .into_par_iter()
        .map(|i| {
            let start = Instant::now();
            let (beta, std_errors, subsample_size) =
                estimate_once(data, method, params, derive_seed(params.seed, i as u64))?;
            Ok(Replicate {
                index: i,
                beta,
                std_errors,
                subsample_size,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeStats {
    pub median: f64,
    pub iqr: f64,
    pub mean: f64,
}

impl TimeStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return TimeStats {
                median: 0.0,
                iqr: 0.0,
                mean: 0.0,
            };
        }
        let mut v = samples.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        TimeStats {
            median: quantile_sorted(&v, 0.5),
            iqr: quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let h = q * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: String,
    pub case_id: Option<CaseId>,
    pub r: f64,
    pub r0: f64,
    pub rho: f64,
    pub k: usize,
    pub threshold: ThresholdMode,
    pub replications: usize,
    pub failures: usize,
    pub mse: f64,
    pub mse_reference: MseReference,
    pub coverage: Option<f64>,
    pub avg_ci_length: Option<f64>,
    pub mean_subsample_size: f64,
    pub wall_time: TimeStats,
}

/// Targets replicates are compared against.
#[derive(Debug, Clone)]
pub struct Targets {
    pub mse_target: DVector<f64>,
    pub mse_reference: MseReference,
    /// Point the confidence intervals should cover (the full-data estimate).
    pub coverage_target: Option<DVector<f64>>,
    pub case_id: Option<CaseId>,
}

/// Normal quantile for a two-sided interval at `level`.
pub fn z_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    if level == 0.95 {
        return Ok(Z_95);
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// Summarizes replicates into a report. More than 5% failures is an error.
pub fn summarize(
    method: Criterion,
    params: &ExperimentParams,
    targets: &Targets,
    reps: Vec<Result<Replicate>>,
) -> Result<ExperimentReport> {
    let total = reps.len();
    let mut ok = Vec::with_capacity(total);
    let mut first_err = None;
    for r in reps {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e.to_string());
                }
            }
        }
    }
    let failures = total - ok.len();
    if failures > 0 {
        warn!(
            "{}: {failures} of {total} replications failed",
            method.label()
        );
    }
    if failures as f64 > 0.05 * total as f64 || ok.is_empty() {
        return Err(Error::TooManyFailures {
            failed: failures,
            total,
            first: first_err.unwrap_or_default(),
        });
    }
    let m = ok.len() as f64;
    let mse = ok
        .iter()
        .map(|rep| {
            rep.beta
                .iter()
                .zip(targets.mse_target.iter())
                .map(|(b, t)| (b - t).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / m;
    let (coverage, avg_ci_length) = match (params.coverage_index, &targets.coverage_target) {
        (Some(j), Some(target)) => {
            let z = z_value(params.level)?;
            let mut covered = 0usize;
            let mut len = 0.0;
            let mut counted = 0usize;
            for rep in &ok {
                if let Some(se) = &rep.std_errors {
                    let half = z * se[j];
                    if (rep.beta[j] - target[j]).abs() <= half {
                        covered += 1;
                    }
                    len += 2.0 * half;
                    counted += 1;
                }
            }
            if counted == 0 {
                (None, None)
            } else {
                (
                    Some(covered as f64 / counted as f64),
                    Some(len / counted as f64),
                )
            }
        }
        _ => (None, None),
    };
    let times: Vec<f64> = ok.iter().map(|r| r.seconds).collect();
    Ok(ExperimentReport {
        method: method.label().to_string(),
        case_id: targets.case_id,
        r: params.r,
        r0: params.r0,
        rho: if method == Criterion::Uniform {
            1.0
        } else {
            params.rho
        },
        k: params.k,
        threshold: params.threshold,
        replications: total,
        failures,
        mse,
        mse_reference: targets.mse_reference,
        coverage,
        avg_ci_length,
        mean_subsample_size: ok.iter().map(|r| r.subsample_size as f64).sum::<f64>() / m,
        wall_time: TimeStats::from_samples(&times),
    })
}

/// `t` replications for each method, one report per method in the given order.
pub fn run_replications(
    data: &Arc<Dataset>,
    targets: &Targets,
    methods: &[Criterion],
    params: &ExperimentParams,
    t: usize,
) -> Result<Vec<ExperimentReport>> {
    if t == 0 {
        return Err(Error::Config("at least one replication is required".into()));
    }
    methods
        .iter()
        .map(|&m| summarize(m, params, targets, replicate(data, m, params, t)))
        .collect()
}

/// Replications over a grid of shrinkage values; uniform is run once as the baseline.
pub fn rho_sweep(
    data: &Arc<Dataset>,
    targets: &Targets,
    methods: &[Criterion],
    rho_grid: &[f64],
    params: &ExperimentParams,
    t: usize,
) -> Result<Vec<ExperimentReport>> {
    let mut out = Vec::new();
    for &rho in rho_grid {
        let p = ExperimentParams { rho, ..*params };
        let shrunk: Vec<Criterion> = methods
            .iter()
            .copied()
            .filter(|m| *m != Criterion::Uniform)
            .collect();
        out.extend(run_replications(data, targets, &shrunk, &p, t)?);
    }
    if methods.contains(&Criterion::Uniform) {
        out.extend(run_replications(
            data,
            targets,
            &[Criterion::Uniform],
            params,
            t,
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    /// `UNIF`, `MV`, `MVc` or `FULL`.
    pub method: String,
    pub r: Option<f64>,
    pub repeats: usize,
    pub seconds: TimeStats,
}

/// Wall-clock times of each method and of the full-data fit, run sequentially.
pub fn timing_study(
    data: &Arc<Dataset>,
    methods: &[Criterion],
    r_grid: &[f64],
    params: &ExperimentParams,
    repeats: usize,
) -> Result<Vec<TimingRow>> {
    if repeats < 3 {
        return Err(Error::Config("timing needs at least 3 repeats".into()));
    }
    let mut rows = Vec::new();
    for &r in r_grid {
        for &m in methods {
            let p = ExperimentParams { r, ..*params };
            let mut times = Vec::with_capacity(repeats);
            for i in 0..repeats {
                let start = Instant::now();
                estimate_once(data, m, &p, derive_seed(params.seed, i as u64))?;
                times.push(start.elapsed().as_secs_f64());
            }
            rows.push(TimingRow {
                method: m.label().to_string(),
                r: Some(r),
                repeats,
                seconds: TimeStats::from_samples(&times),
            });
        }
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        full_qle(data.as_ref(), params.family)?;
        times.push(start.elapsed().as_secs_f64());
    }
    rows.push(TimingRow {
        method: "FULL".to_string(),
        r: None,
        repeats,
        seconds: TimeStats::from_samples(&times),
    });
    Ok(rows)
}

/// Reports as CSV with a header row.
pub fn reports_to_csv(reports: &[ExperimentReport]) -> String {
    let mut s = String::from(
        "method,case,r,r0,rho,k,threshold,replications,failures,mse,mse_reference,coverage,avg_ci_length,mean_subsample_size,median_seconds\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.case_id.map(|c| c.to_string()).unwrap_or_default(),
            r.r,
            r.r0,
            r.rho,
            r.k,
            r.threshold,
            r.replications,
            r.failures,
            r.mse,
            match r.mse_reference {
                MseReference::FullQle => "full_qle",
                MseReference::TrueBeta => "true_beta",
            },
            opt(r.coverage),
            opt(r.avg_ci_length),
            r.mean_subsample_size,
            r.wall_time.median,
        ));
    }
    s
}
