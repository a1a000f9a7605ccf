use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::commands::run_search_outcome;
use super::config::{RunConfig, SampleSpace, SweepConfig, SweepModel};
use super::{csv_writer, write_text};
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Invalid,
    Diverged,
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub lambda: f64,
    pub seed: u64,
    /// Relative to the sweep output directory; empty when the trial diverged.
    pub genotype: String,
    pub valid: bool,
    pub derived_param_count: Option<u64>,
    pub meets_budget: bool,
    pub search_val_error: Option<f64>,
    pub status: TrialStatus,
}

/// Draws `num_samples` values of λ between `10^low` and `10^high`, uniform in
/// the exponent (`Log`) or in the value (`Linear`).
pub fn sample_lambdas(cfg: &SweepConfig) -> Vec<f64> {
    let mut rng = seeded(cfg.seed);
    (0..cfg.num_samples)
        .map(|_| match cfg.sample_space {
            SampleSpace::Log => 10f64.powf(rng.random_range(cfg.lambda_low_exp..cfg.lambda_high_exp)),
            SampleSpace::Linear => {
                rng.random_range(10f64.powf(cfg.lambda_low_exp)..10f64.powf(cfg.lambda_high_exp))
            }
        })
        .collect()
}

struct Trial {
    sample: usize,
    replicate: usize,
    lambda: f64,
    seed: u64,
}

/// `sweep`: `num_samples × seeds_per_lambda` independent searches on a
/// bounded worker pool. Trials that diverge are recorded and the sweep
/// continues. Writes `sweep.csv`, `plot_points.csv`, `plot_lines.csv` and one
/// genotype per trial under `trials/`.
pub fn sweep(run: &RunConfig, out: &Path) -> Result<Vec<SweepRecord>> {
    run.validate()?;
    let sc = &run.sweep;
    let splits = run.splits()?;
    let latency = run.latency()?;
    let trials: Vec<Trial> = sample_lambdas(sc)
        .into_iter()
        .enumerate()
        .flat_map(|(i, lambda)| {
            (0..sc.seeds_per_lambda).map(move |j| Trial {
                sample: i,
                replicate: j,
                lambda,
                seed: run.search.seed + j as u64,
            })
        })
        .collect();

    let workers = run
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    let records: Vec<Result<SweepRecord>> = pool.install(|| {
        trials
            .par_iter()
            .map(|t| {
                let mut trial = run.clone();
                trial.search.seed = t.seed;
                match sc.model {
                    SweepModel::Params => trial.search.lambdas.params = t.lambda,
                    SweepModel::Macs => trial.search.lambdas.macs = t.lambda,
                    SweepModel::Latency => trial.search.lambdas.latency = t.lambda,
                }
                let outcome = run_search_outcome(&trial, &splits, latency.clone())?;
                let s = &outcome.summary;
                let mut genotype = String::new();
                if let Some(r) = &outcome.result {
                    genotype = format!("trials/{:03}_{}/genotype.json", t.sample, t.replicate);
                    write_text(&out.join(&genotype), &r.genotype.to_json()?)?;
                }
                Ok(SweepRecord {
                    lambda: t.lambda,
                    seed: t.seed,
                    genotype,
                    valid: s.valid,
                    derived_param_count: s.derived_param_count,
                    meets_budget: s.meets_budget,
                    search_val_error: s.search_val_error,
                    status: s.status,
                })
            })
            .collect()
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;

    // Single sink, in trial order, so the files do not depend on scheduling.
    let path = out.join("sweep.csv");
    let mut w = csv_writer(&path)?;
    for r in &records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join("plot_points.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["lambda", "derived_param_count", "valid", "meets_budget"])?;
    for r in records.iter().filter(|r| r.derived_param_count.is_some()) {
        w.write_record([
            r.lambda.to_string(),
            r.derived_param_count.unwrap_or(0).to_string(),
            r.valid.to_string(),
            r.meets_budget.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join("plot_lines.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["label", "value", "style"])?;
    w.write_record(["budget", &run.budget.to_string(), "solid"])?;
    for l in &sc.reference_lines {
        w.write_record([l.label.as_str(), &l.value.to_string(), l.style.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(records)
}
