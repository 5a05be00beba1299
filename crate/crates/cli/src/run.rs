use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use log::info;
use nalgebra::{DMatrix, DVector};
use poissub::distributed::{run_distributed, PartitionSummary};
use poissub::pipeline::{run_two_step, ContextInfo};
use poissub::synth::{self, ExperimentParams, Targets};
use poissub::{
    full_data_qle, partition_view, CsvSource, Error, FitResult, RecordSource, SamplingPlan,
    SolverOptions,
};
use serde_json::{json, Value};

use crate::config::{Command, Format, ModelArgs, RunConfig, SamplingArgs, StudyArgs};

/// A command's JSON fields plus the CSV rendering of its table.
struct Output(Value, String);

pub fn execute(config: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let out = match &config.command {
        Command::GenData(a) => {
            let dir = config
                .output
                .out
                .as_deref()
                .ok_or_else(|| Error::Config("gen-data needs --out <directory>".into()))?;
            let meta = synth::write_case(&poissub::CaseSpec::new(a.case, a.n, a.seed), dir)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({ "config": config, "metadata": meta }))?
            );
            return Ok(());
        }
        Command::FitFull(a) => {
            let src = CsvSource::open(&a.data.data, a.data.csv_options())?;
            let d = src.dim();
            let fit = full_data_qle(&src, a.model.family, &DVector::zeros(d), &solver(&a.model))?;
            info!(
                "full-data fit: {} iterations over {} rows",
                fit.iterations, fit.subsample_size
            );
            let doc = json!({
                "estimate": fit.beta.as_slice(),
                "n": fit.subsample_size,
                "iterations": fit.iterations,
                "converged": fit.converged,
                "score_norm": fit.score_norm,
            });
            Output(doc, coefficient_csv(&fit.beta, None, 0.0))
        }
        Command::Fit(a) => {
            let src = CsvSource::open(&a.data.data, a.data.csv_options())?;
            let plan = plan(&a.sampling);
            let run = run_two_step(
                &src,
                a.model.family,
                &plan,
                a.sampling.r0,
                &solver(&a.model),
            )?;
            let mut doc = fit_document(&run.fit, a.sampling.level)?;
            doc["subsample"] = json!({
                "pilot_realized": run.pilot.realized_r0,
                "pilot_expected": run.pilot.r0.min(run.pilot.n as f64),
                "second_realized": run.second_stage.sample.len(),
                "second_expected": run.second_stage.stats.expected_size,
                "total": run.fit.subsample_size,
                "n": run.pilot.n,
            });
            doc["diagnostics"] = json!({
                "pilot_iterations": run.pilot.iterations,
                "pilot_converged": run.pilot.converged,
                "pilot_degenerate": run.pilot.degenerate,
                "pilot_estimate": run.pilot.beta0.as_slice(),
                "pilot_scale": run.second_stage.pilot_scale,
                "context": context_json(&run.second_stage.context),
                "capped": run.second_stage.stats.capped,
                "zero_probability": run.second_stage.stats.zero_probability,
            });
            let csv = coefficient_csv(&run.fit.beta, run.fit.std_errors(), z(a.sampling.level)?);
            Output(doc, csv)
        }
        Command::FitDistributed(a) => {
            let files = if a.data.is_empty() {
                expand_partitions(&a.partitions)?
            } else {
                a.data.clone()
            };
            let k = a.k.unwrap_or(files.len());
            let src: Arc<dyn RecordSource> = Arc::new(CsvSource::open(&files, a.csv_options())?);
            let shards = partition_view(src, k)?;
            let run = run_distributed(
                &shards,
                a.model.family,
                &plan(&a.sampling),
                a.sampling.r0,
                &solver(&a.model),
            )?;
            let mut doc = fit_document(&run.fit, a.sampling.level)?;
            doc["pilot_scale"] = json!(run.pilot_scale);
            doc["partitions"] = Value::Array(run.summaries.iter().map(partition_json).collect());
            let csv = coefficient_csv(&run.fit.beta, run.fit.std_errors(), z(a.sampling.level)?);
            Output(doc, csv)
        }
        Command::Experiment(a) => {
            let (data, targets) = study_data(&a.study)?;
            let params = params(&a.study, a.rho);
            let reports =
                synth::run_replications(&data, &targets, &a.study.methods, &params, a.study.t)?;
            let csv = synth::reports_to_csv(&reports);
            Output(
                json!({ "reports": strip_timing(json!(reports), config.output.record_timing) }),
                csv,
            )
        }
        Command::RhoSweep(a) => {
            let (data, targets) = study_data(&a.study)?;
            let params = params(&a.study, 0.0);
            let reports = synth::rho_sweep(
                &data,
                &targets,
                &a.study.methods,
                &a.rho_grid,
                &params,
                a.study.t,
            )?;
            let csv = synth::reports_to_csv(&reports);
            Output(
                json!({ "reports": strip_timing(json!(reports), config.output.record_timing) }),
                csv,
            )
        }
        Command::Bench(a) => {
            let data = Arc::new(
                synth::generate_case(&poissub::CaseSpec::new(a.case, a.n, a.data_seed))?.0,
            );
            let params = ExperimentParams {
                r0: a.r0,
                rho: a.rho,
                seed: a.seed,
                coverage_index: None,
                ..ExperimentParams::default()
            };
            let rows = synth::timing_study(&data, &a.methods, &a.r_grid, &params, a.repeats)?;
            let mut csv =
                String::from("method,r,repeats,median_seconds,iqr_seconds,mean_seconds\n");
            for r in &rows {
                let rr = r.r.map(|v| v.to_string()).unwrap_or_default();
                let s = r.seconds;
                csv.push_str(&format!(
                    "{},{rr},{},{},{},{}\n",
                    r.method, r.repeats, s.median, s.iqr, s.mean
                ));
            }
            Output(json!({ "timings": rows }), csv)
        }
    };
    emit(config, out, start.elapsed().as_secs_f64())
}

fn emit(config: &RunConfig, out: Output, seconds: f64) -> Result<()> {
    let Output(mut doc, csv) = out;
    let text = match config.output.format {
        Format::Csv => csv,
        Format::Json => {
            let mut full = json!({ "config": config });
            if let Value::Object(m) = &mut doc {
                for (k, v) in std::mem::take(m) {
                    full[k] = v;
                }
            }
            if config.output.record_timing {
                full["timing"] = json!({ "total_seconds": seconds });
            }
            let mut s = serde_json::to_string_pretty(&full)?;
            s.push('\n');
            s
        }
    };
    match &config.output.out {
        Some(path) => std::fs::write(path, text)
            .map_err(Error::from)
            .with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(Error::from)?,
    }
    Ok(())
}

fn solver(m: &ModelArgs) -> SolverOptions {
    SolverOptions {
        ridge: m.ridge,
        ..SolverOptions::default()
    }
}

fn plan(s: &SamplingArgs) -> SamplingPlan {
    SamplingPlan::new(s.criterion, s.r, s.rho, s.seed).with_threshold(s.threshold)
}

fn z(level: f64) -> Result<f64> {
    Ok(synth::z_value(level)?)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn fit_document(fit: &FitResult, level: f64) -> Result<Value> {
    let z = z(level)?;
    let se = fit.std_errors();
    let bounds = |sign: f64| {
        se.as_ref().map(|se| {
            fit.beta
                .iter()
                .zip(se)
                .map(|(b, s)| b + sign * z * s)
                .collect::<Vec<f64>>()
        })
    };
    Ok(json!({
        "estimate": fit.beta.as_slice(),
        "std_errors": se,
        "ci": { "level": level, "z": z, "lower": bounds(-1.0), "upper": bounds(1.0) },
        "variance": fit.variance.as_ref().map(rows),
        "iterations": fit.iterations,
        "converged": fit.converged,
        "score_norm": fit.score_norm,
        "subsample_size": fit.subsample_size,
    }))
}

fn context_json(c: &ContextInfo) -> Value {
    json!({
        "criterion": c.criterion,
        "threshold": if c.threshold.is_finite() { json!(c.threshold) } else { json!("inf") },
        "psi_hat": c.psi_hat,
        "fell_back_to_uniform": c.fell_back_to_uniform,
    })
}

fn partition_json(s: &PartitionSummary) -> Value {
    json!({
        "id": s.partition_id,
        "first_index": s.first_index,
        "n": s.n,
        "realized_size": s.realized_size,
        "expected_size": s.expected_size,
        "iterations": s.iterations,
        "converged": s.converged,
        "estimate": s.beta.as_slice(),
        "context": s.context.as_ref().map(context_json),
    })
}

fn coefficient_csv(beta: &DVector<f64>, se: Option<Vec<f64>>, z: f64) -> String {
    let mut s = String::from("coefficient,estimate,std_error,lower,upper\n");
    for (j, b) in beta.iter().enumerate() {
        match &se {
            Some(se) => s.push_str(&format!(
                "{j},{b},{},{},{}\n",
                se[j],
                b - z * se[j],
                b + z * se[j]
            )),
            None => s.push_str(&format!("{j},{b},,,\n")),
        }
    }
    s
}

fn expand_partitions(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(Error::from)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(Error::Config(format!("no .csv files in {}", p.display())).into());
            }
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn study_data(s: &StudyArgs) -> Result<(Arc<poissub::Dataset>, Targets)> {
    let spec = poissub::CaseSpec::new(s.case, s.n, s.data_seed);
    let (data, redraws) = synth::generate_case(&spec)?;
    info!(
        "generated case {} with {} rows ({redraws} redraws)",
        s.case, s.n
    );
    let reference = s
        .reference
        .map(Into::into)
        .unwrap_or(s.case.default_reference());
    let full = synth::full_qle(&data, poissub::LinkFamily::Exp)?;
    let mse_target = match reference {
        poissub::MseReference::FullQle => full.clone(),
        poissub::MseReference::TrueBeta => spec.beta_true(),
    };
    let targets = Targets {
        mse_target,
        mse_reference: reference,
        coverage_target: Some(full),
        case_id: Some(s.case),
    };
    Ok((Arc::new(data), targets))
}

fn params(s: &StudyArgs, rho: f64) -> ExperimentParams {
    ExperimentParams {
        r: s.r,
        r0: s.r0,
        rho,
        k: s.k,
        threshold: s.threshold,
        level: s.level,
        coverage_index: Some(s.coverage_index),
        seed: s.seed,
        solver: SolverOptions {
            ridge: s.ridge,
            ..SolverOptions::default()
        },
        ..ExperimentParams::default()
    }
}

fn strip_timing(mut reports: Value, keep: bool) -> Value {
    if !keep {
        if let Value::Array(list) = &mut reports {
            for r in list {
                if let Value::Object(m) = r {
                    m.remove("wall_time");
                }
            }
        }
    }
    reports
}
