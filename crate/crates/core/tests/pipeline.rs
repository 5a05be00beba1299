use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use poissub::estimator::full_data_qle;
use poissub::estimator::solve_weighted_qle;
use poissub::pipeline::{run_pilot, run_two_step};
use poissub::rng::derive_seed;
use poissub::sampling::{
    optimal_probabilities, score_mv, score_mvc, waterfill, Criterion, SamplingPlan, ThresholdMode,
};
use poissub::synth::{self, CaseId, CaseSpec, ExperimentParams, MseReference, Targets};
use poissub::{asymptotic_variance, Dataset, LinkFamily, SolverOptions, WeightedObservation};

fn case(case: CaseId, n: u64, seed: u64) -> Arc<Dataset> {
    Arc::new(
        synth::generate_case(&CaseSpec::new(case, n, seed))
            .unwrap()
            .0,
    )
}

fn full_targets(data: &Dataset, case: CaseId) -> Targets {
    let full = synth::full_qle(data, LinkFamily::Exp).unwrap();
    Targets {
        mse_target: full.clone(),
        mse_reference: MseReference::FullQle,
        coverage_target: Some(full),
        case_id: Some(case),
    }
}

#[test]
fn mv_beats_uniform_on_case_one() {
    let data = case(CaseId::C1, 50_000, 1);
    let targets = full_targets(&data, CaseId::C1);
    let params = ExperimentParams {
        r: 1000.0,
        seed: 31,
        ..ExperimentParams::default()
    };
    let reps = synth::run_replications(
        &data,
        &targets,
        &[Criterion::Uniform, Criterion::Mv],
        &params,
        500,
    )
    .unwrap();
    let ratio = reps[1].mse / reps[0].mse;
    assert!(
        (0.45..=0.95).contains(&ratio),
        "MSE(MV)/MSE(UNIF) = {ratio}"
    );
}

#[test]
fn realized_second_pass_size_tracks_expectation() {
    let data = case(CaseId::C4, 50_000, 2);
    let (mut realized, mut expected) = (0.0, 0.0);
    for s in 0..200 {
        let plan = SamplingPlan::new(Criterion::Mv, 1000.0, 0.2, derive_seed(99, s));
        let fit = run_two_step(
            data.as_ref(),
            LinkFamily::Exp,
            &plan,
            200.0,
            &SolverOptions::default(),
        )
        .unwrap();
        realized += fit.second_stage.sample.len() as f64;
        expected += fit.second_stage.stats.expected_size;
    }
    let (realized, expected) = (realized / 200.0, expected / 200.0);
    assert!(
        (realized - expected).abs() <= 0.05 * expected,
        "{realized} vs {expected}"
    );
    // With the pilot estimate of Psi the expected size drifts from r; computing
    // Psi over the full data restores sum p = r exactly.
    for s in 0..5 {
        let plan =
            SamplingPlan::new(Criterion::Mv, 1000.0, 0.2, s).with_threshold(ThresholdMode::Exact);
        let fit = run_two_step(
            data.as_ref(),
            LinkFamily::Exp,
            &plan,
            200.0,
            &SolverOptions::default(),
        )
        .unwrap();
        let e = fit.second_stage.stats.expected_size;
        assert!((e - 1000.0).abs() <= 1e-6 * 1000.0, "{e}");
    }
}

#[test]
fn infinite_and_exact_thresholds_agree_at_small_sampling_rate() {
    let data = case(CaseId::C1, 50_000, 3);
    let targets = full_targets(&data, CaseId::C1);
    let mse = |mode| {
        let params = ExperimentParams {
            r: 500.0,
            threshold: mode,
            seed: 47,
            ..ExperimentParams::default()
        };
        synth::run_replications(&data, &targets, &[Criterion::Mv], &params, 500).unwrap()[0].mse
    };
    let (inf, exact) = (mse(ThresholdMode::Infinite), mse(ThresholdMode::Exact));
    assert!(
        (inf - exact).abs() <= 0.1 * inf.max(exact),
        "inf {inf} exact {exact}"
    );
}

#[test]
fn pilot_estimate_is_in_the_right_neighbourhood() {
    let data = case(CaseId::C1, 50_000, 4);
    let truth = DVector::from_vec(CaseId::C1.beta_true());
    let mut errs: Vec<f64> = (0..200)
        .map(|s| {
            let p = run_pilot(
                data.as_ref(),
                LinkFamily::Exp,
                200.0,
                derive_seed(5, s),
                &SolverOptions::default(),
            )
            .unwrap();
            (&p.beta0 - &truth).norm()
        })
        .collect();
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = 0.5 * (errs[99] + errs[100]);
    assert!(median <= 0.35, "median pilot error {median}");
}

#[test]
fn plug_in_variance_matches_monte_carlo_spread() {
    let data = case(CaseId::C1, 50_000, 6);
    let t = 500;
    let d = 7;
    let mut betas = Vec::with_capacity(t);
    let mut vbar = DMatrix::<f64>::zeros(d, d);
    for s in 0..t {
        let plan = SamplingPlan::new(Criterion::Mvc, 1000.0, 0.2, derive_seed(8, s as u64));
        let fit = run_two_step(
            data.as_ref(),
            LinkFamily::Exp,
            &plan,
            200.0,
            &SolverOptions::default(),
        )
        .unwrap()
        .fit;
        vbar += fit.variance.unwrap();
        betas.push(fit.beta);
    }
    vbar /= t as f64;
    let mean = betas.iter().fold(DVector::zeros(d), |a, b| a + b) / t as f64;
    let emp = betas.iter().fold(DMatrix::zeros(d, d), |a, b| {
        a + (b - &mean) * (b - &mean).transpose()
    }) / (t - 1) as f64;
    for i in 0..d {
        for j in 0..d {
            let scale = (vbar[(i, i)] * vbar[(j, j)]).sqrt();
            let gap = (emp[(i, j)] - vbar[(i, j)]).abs() / scale;
            assert!(
                gap <= 0.15,
                "({i},{j}): empirical {} vs plug-in {}",
                emp[(i, j)],
                vbar[(i, j)]
            );
        }
    }
}

#[test]
fn optimal_probabilities_reduce_the_asymptotic_variance() {
    let data = case(CaseId::C3, 20_000, 7);
    let beta = synth::full_qle(data.as_ref(), LinkFamily::Exp).unwrap();
    let n = data.len();
    let r = 400.0;
    // Sigma = N^-1 sum psi'(beta'x) x x'.
    let mut sigma = DMatrix::<f64>::zeros(7, 7);
    for (x, _) in data.rows() {
        let xv = DVector::from_column_slice(x);
        sigma += &xv * xv.transpose() * xv.dot(&beta).exp();
    }
    sigma /= n as f64;
    let sigma_inv = sigma.clone().try_inverse().unwrap();
    let b = beta.as_slice();
    let mv: Vec<f64> = data
        .rows()
        .map(|(x, y)| score_mv(x, y, LinkFamily::Exp, b, &sigma_inv).unwrap())
        .collect();
    let mvc: Vec<f64> = data
        .rows()
        .map(|(x, y)| score_mvc(x, y, LinkFamily::Exp, b))
        .collect();
    let probs =
        |h: &[f64]| optimal_probabilities(h, r, waterfill(h, r).unwrap().threshold).unwrap();
    let uniform = vec![r / n as f64; n];
    let v = |p: &[f64]| asymptotic_variance(&data, LinkFamily::Exp, &beta, p).unwrap();
    let (v_unif, v_mv, v_mvc) = (v(&uniform), v(&probs(&mv)), v(&probs(&mvc)));
    assert!(v_mv.trace() <= v_unif.trace());
    assert!(v_mv.trace() <= v_mvc.trace());
    // MVc minimises tr(V_c) = tr(Sigma V Sigma).
    let vc = |m: &DMatrix<f64>| (&sigma * m * &sigma).trace();
    assert!(vc(&v_mvc) <= vc(&v_mv));
    assert!(vc(&v_mvc) <= vc(&v_unif));
}

fn moments(z: &[f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let m = z.iter().sum::<f64>() / n;
    let c = |k: i32| z.iter().map(|v| (v - m).powi(k)).sum::<f64>() / n;
    (c(3) / c(2).powf(1.5), c(4) / (c(2) * c(2)) - 3.0)
}

#[test]
fn estimates_look_normal_at_moderate_subsample_size() {
    let data = case(CaseId::S1, 50_000, 9);
    let params = ExperimentParams {
        r: 2000.0,
        seed: 61,
        ..ExperimentParams::default()
    };
    for method in [Criterion::Mv, Criterion::Mvc, Criterion::Uniform] {
        let first: Vec<f64> = synth::replicate(&data, method, &params, 500)
            .into_iter()
            .map(|r| r.unwrap().beta[0])
            .collect();
        let (skew, kurt) = moments(&first);
        assert!(
            skew.abs() <= 0.25 && kurt.abs() <= 0.5,
            "{method}: skew {skew} kurtosis {kurt}"
        );
    }
}

#[test]
fn newton_converges_quickly_on_full_data() {
    let data = case(CaseId::C1, 10_000, 10);
    let fit = full_data_qle(
        data.as_ref(),
        LinkFamily::Exp,
        &DVector::zeros(7),
        &SolverOptions::default(),
    )
    .unwrap();
    assert!(
        fit.converged && fit.iterations <= 25,
        "{} iterations",
        fit.iterations
    );
}

#[test]
fn full_data_estimate_is_consistent() {
    let data = case(CaseId::C1, 500_000, 11);
    let beta = synth::full_qle(data.as_ref(), LinkFamily::Exp).unwrap();
    let truth = DVector::from_vec(CaseId::C1.beta_true());
    assert!((beta - truth).amax() <= 0.02);
}

#[test]
fn estimate_ignores_record_order() {
    let data = case(CaseId::C2, 20_000, 12);
    let plan = SamplingPlan::new(Criterion::Mv, 800.0, 0.2, 3);
    let fit = run_two_step(
        data.as_ref(),
        LinkFamily::Exp,
        &plan,
        200.0,
        &SolverOptions::default(),
    )
    .unwrap();
    let mut shuffled: Vec<WeightedObservation> = fit.second_stage.sample.clone();
    shuffled.reverse();
    shuffled.rotate_left(17);
    let init = &fit.pilot.beta0;
    let a = solve_weighted_qle(
        &fit.second_stage.sample,
        LinkFamily::Exp,
        init,
        &SolverOptions::default(),
    )
    .unwrap();
    let b =
        solve_weighted_qle(&shuffled, LinkFamily::Exp, init, &SolverOptions::default()).unwrap();
    assert_eq!(a.beta, b.beta);
}

#[test]
fn shrinkage_one_reproduces_the_uniform_subsample() {
    let data = case(CaseId::C1, 20_000, 13);
    for seed in 0..5 {
        let unif = SamplingPlan::new(Criterion::Uniform, 500.0, 0.2, seed);
        let mv = SamplingPlan::new(Criterion::Mv, 500.0, 1.0, seed);
        let a = run_two_step(
            data.as_ref(),
            LinkFamily::Exp,
            &unif,
            200.0,
            &SolverOptions::default(),
        )
        .unwrap();
        let b = run_two_step(
            data.as_ref(),
            LinkFamily::Exp,
            &mv,
            200.0,
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(a.second_stage.sample, b.second_stage.sample);
        assert_eq!(a.fit.beta, b.fit.beta);
    }
}
