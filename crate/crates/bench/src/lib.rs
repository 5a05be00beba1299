//! Fixtures shared by the benchmarks.

use poissub::pipeline::{run_pilot, PilotResult};
use poissub::rng::{self, Stream};
use poissub::synth::{self, CaseId, CaseSpec};
use poissub::{Dataset, LinkFamily, SolverOptions, WeightedObservation};

/// Positive, right-skewed scores resembling residual-times-norm values.
pub fn skewed_scores(n: usize, seed: u64) -> Vec<f64> {
    (0..n as u64)
        .map(|i| {
            let u = rng::uniform(seed, Stream::Pilot, i);
            (-u.max(1e-300).ln()).powf(1.5)
        })
        .collect()
}

pub fn case(case: CaseId, n: u64) -> Dataset {
    synth::generate_case(&CaseSpec::new(case, n, 17))
        .expect("valid case")
        .0
}

pub fn pilot(data: &Dataset, r0: f64) -> PilotResult {
    run_pilot(data, LinkFamily::Exp, r0, 3, &SolverOptions::default()).expect("pilot fits")
}

/// A uniform inclusion sample of expected size `r`.
pub fn uniform_sample(data: &Dataset, r: f64) -> Vec<WeightedObservation> {
    let p = (r / data.len() as f64).min(1.0);
    data.rows()
        .enumerate()
        .filter(|(i, _)| rng::include(5, Stream::Second, *i as u64, p))
        .map(|(i, (x, y))| WeightedObservation {
            index: i as u64,
            x: x.to_vec(),
            y,
            p,
        })
        .collect()
}
