use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::sweep::TrialStatus;
use super::{csv_writer, read_input, write_json, write_text, OUTPUT_SCHEMA_VERSION};
use crate::cost::{expected_cost, total_resource_loss, LatencyTable};
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::primitives::PrimitiveSpec;
use crate::search::{cost_models, run_search, train_from_scratch, EpochRecord, Lambdas, SearchResult, TrainReport};
use crate::supernet::{
    derive_genotype, edge_endpoints, genotype_param_count, AlphaStore, AlphaTable, CellKind, Genotype, NetLayout, EDGES,
};

pub const STAGE_LOG_HEADER: [&str; 8] = [
    "stage",
    "epoch",
    "train_loss",
    "val_loss",
    "C_params",
    "C_macs",
    "C_latency",
    "alpha_digest",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub schema_version: u32,
    pub status: TrialStatus,
    pub seed: u64,
    pub lambdas: Lambdas,
    pub final_costs: BTreeMap<String, f64>,
    /// `Σ λ_m C_m` at the final α.
    pub resource_loss: f64,
    pub valid: bool,
    pub validity: String,
    pub rule: Option<String>,
    pub normal_skip_count: Option<usize>,
    pub search_val_error: Option<f64>,
    pub derived_param_count: Option<u64>,
    pub eval_depth: usize,
    pub eval_channels: usize,
    pub budget: u64,
    pub meets_budget: bool,
    pub alpha_digest: Option<String>,
    pub divergence: Option<String>,
}

/// A search that either finished or diverged; any other failure is an error.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub summary: SearchSummary,
    pub result: Option<SearchResult>,
}

/// Runs one search and summarizes it. Divergence is an outcome, not an error.
pub fn run_search_outcome(run: &RunConfig, splits: &Splits, latency: Option<Arc<LatencyTable>>) -> Result<SearchOutcome> {
    let cfg = &run.search;
    let mut summary = SearchSummary {
        schema_version: OUTPUT_SCHEMA_VERSION,
        status: TrialStatus::Diverged,
        seed: cfg.seed,
        lambdas: cfg.lambdas,
        final_costs: BTreeMap::new(),
        resource_loss: 0.0,
        valid: false,
        validity: String::new(),
        rule: None,
        normal_skip_count: None,
        search_val_error: None,
        derived_param_count: None,
        eval_depth: cfg.eval_depth,
        eval_channels: cfg.eval_channels,
        budget: run.budget,
        meets_budget: false,
        alpha_digest: None,
        divergence: None,
    };
    let result = match run_search(cfg, splits, latency) {
        Ok(r) => r,
        Err(e @ (Error::Divergence { .. } | Error::Numeric { .. })) => {
            summary.validity = "diverged".into();
            summary.divergence = Some(e.to_string());
            return Ok(SearchOutcome { summary, result: None });
        }
        Err(e) => return Err(e),
    };
    let count = genotype_param_count(&result.genotype, cfg.eval_depth, cfg.eval_channels, cfg.num_classes)?;
    let values: Vec<f64> = result.final_costs.iter().map(|(_, v)| *v).collect();
    let lambdas = cfg.lambda_vector();
    summary.resource_loss = total_resource_loss(&values, &lambdas[..values.len()])?;
    summary.final_costs = result.final_costs.iter().cloned().collect();
    summary.status = if result.valid() {
        TrialStatus::Ok
    } else {
        TrialStatus::Invalid
    };
    summary.valid = result.valid();
    summary.validity = result.validity.to_string();
    summary.rule = result.validity.rule().map(str::to_string);
    summary.normal_skip_count = Some(result.genotype.normal_skip_count());
    summary.search_val_error = Some(result.search_val_error);
    summary.derived_param_count = Some(count);
    summary.meets_budget = count <= run.budget;
    summary.alpha_digest = Some(result.alphas.digest());
    Ok(SearchOutcome {
        summary,
        result: Some(result),
    })
}

/// Per-epoch log: one row per epoch, costs of unregistered models left empty.
pub fn write_stage_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(STAGE_LOG_HEADER)?;
    let cell = |r: &EpochRecord, name: &str| r.cost(name).map_or(String::new(), |v| v.to_string());
    for r in history {
        w.write_record([
            r.stage.to_string(),
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            cell(r, "params"),
            cell(r, "macs"),
            cell(r, "latency"),
            r.alpha_digest.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `search`: writes `genotype.json`, `alphas.json`, `stage_log.csv` and
/// `summary.json` under `out`.
pub fn search(run: &RunConfig, out: &Path) -> Result<SearchSummary> {
    let splits = run.splits()?;
    let outcome = run_search_outcome(run, &splits, run.latency()?)?;
    if let Some(r) = &outcome.result {
        write_text(&out.join("genotype.json"), &r.genotype.to_json()?)?;
        write_text(&out.join("alphas.json"), &r.alphas.to_json()?)?;
        write_stage_log(&out.join("stage_log.csv"), &r.history)?;
    }
    write_json(&out.join("summary.json"), &outcome.summary)?;
    Ok(outcome.summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeriveReport {
    pub schema_version: u32,
    pub valid: bool,
    pub validity: String,
    pub rule: Option<String>,
    pub normal_skip_count: usize,
    pub derived_param_count: u64,
    pub eval_depth: usize,
    pub eval_channels: usize,
    pub num_classes: usize,
    pub alpha_digest: String,
}

/// `derive`: discretizes an α snapshot at the configured evaluation size.
pub fn derive(alphas_path: &Path, run: &RunConfig, out: &Path) -> Result<(Genotype, DeriveReport)> {
    let alphas = AlphaStore::from_json(&read_input(alphas_path)?)?;
    let cfg = &run.search;
    let g = derive_genotype(&alphas, cfg.eval_channels, cfg.eval_depth);
    let validity = g.validity();
    let report = DeriveReport {
        schema_version: OUTPUT_SCHEMA_VERSION,
        valid: validity.is_valid(),
        validity: validity.to_string(),
        rule: validity.rule().map(str::to_string),
        normal_skip_count: g.normal_skip_count(),
        derived_param_count: genotype_param_count(&g, g.depth, g.init_channels, cfg.num_classes)?,
        eval_depth: g.depth,
        eval_channels: g.init_channels,
        num_classes: cfg.num_classes,
        alpha_digest: alphas.digest(),
    };
    write_text(&out.join("genotype.json"), &g.to_json()?)?;
    write_json(&out.join("derive.json"), &report)?;
    Ok((g, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCost {
    pub name: String,
    /// Genotypes: sum over the chosen ops. Supernets: `C_m` at the given α.
    pub total: f64,
    /// Supernets only: `C_m` with every edge uniform over its candidates.
    pub uniform: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub schema_version: u32,
    pub subject: String,
    pub depth: usize,
    pub init_channels: usize,
    pub input_hw: [usize; 2],
    /// Genotypes only: every weight of the evaluation network.
    pub network_params: Option<u64>,
    pub budget: u64,
    pub meets_budget: Option<bool>,
    pub models: Vec<ModelCost>,
}

fn check_latency(latency: &Option<Arc<LatencyTable>>, specs: &[PrimitiveSpec]) -> Result<()> {
    match latency {
        Some(t) => t.check_coverage(specs),
        None => Ok(()),
    }
}

/// Cost of each op a genotype selects, summed per model over every cell.
pub fn genotype_op_costs(g: &Genotype, layout: &NetLayout, latency: Option<Arc<LatencyTable>>) -> Result<Vec<ModelCost>> {
    let specs: Vec<PrimitiveSpec> = layout
        .cells
        .iter()
        .flat_map(|cl| g.cell(cl.kind).iter().map(|&(src, k)| cl.spec(src, k)))
        .collect();
    check_latency(&latency, &specs)?;
    cost_models(latency)
        .iter()
        .map(|m| {
            let total = specs.iter().map(|s| m.cost(s)).sum::<Result<f64>>()?;
            Ok(ModelCost {
                name: m.name().to_string(),
                total,
                uniform: None,
            })
        })
        .collect()
}

/// `cost` on a genotype, at its own depth and width and the given input size.
pub fn cost_genotype(
    g: &Genotype,
    num_classes: usize,
    input_hw: [usize; 2],
    latency: Option<Arc<LatencyTable>>,
    budget: u64,
) -> Result<CostReport> {
    let layout = NetLayout::new(g.depth, g.init_channels, num_classes, input_hw[0], input_hw[1])?;
    let params = genotype_param_count(g, g.depth, g.init_channels, num_classes)?;
    Ok(CostReport {
        schema_version: OUTPUT_SCHEMA_VERSION,
        subject: "genotype".into(),
        depth: g.depth,
        init_channels: g.init_channels,
        input_hw,
        network_params: Some(params),
        budget,
        meets_budget: Some(params <= budget),
        models: genotype_op_costs(g, &layout, latency)?,
    })
}

/// `C_m` of a supernet laid out as `layout` under `alphas`, per model,
/// computed edge by edge from the cost models alone.
pub fn supernet_expected_costs(
    layout: &NetLayout,
    alphas: &AlphaStore,
    latency: Option<Arc<LatencyTable>>,
) -> Result<Vec<(String, f64)>> {
    let mut specs = Vec::new();
    for cl in &layout.cells {
        let t = alphas.table(cl.kind);
        for e in 0..EDGES {
            let (src, _) = edge_endpoints(e);
            specs.extend(t.ops(e).iter().map(|&k| cl.spec(src, k)));
        }
    }
    check_latency(&latency, &specs)?;
    cost_models(latency)
        .iter()
        .map(|m| {
            let mut total = 0.0;
            for cl in &layout.cells {
                let t = alphas.table(cl.kind);
                for e in 0..EDGES {
                    let (src, _) = edge_endpoints(e);
                    let c = t.ops(e).iter().map(|&k| m.cost(&cl.spec(src, k))).collect::<Result<Vec<_>>>()?;
                    total += expected_cost(&t.probs(e), &c);
                }
            }
            Ok((m.name().to_string(), total))
        })
        .collect()
}

fn uniform_like(t: &AlphaTable) -> Result<AlphaTable> {
    let ops: Vec<_> = (0..EDGES).map(|e| t.ops(e).to_vec()).collect();
    AlphaTable::new(ops, vec![vec![0.0; t.k()]; EDGES])
}

/// `cost` on the supernet of search stage `stage`, under `alphas` (uniform
/// over all eight ops when absent) and under uniform α over the same ops.
pub fn cost_supernet(
    run: &RunConfig,
    stage: usize,
    alphas: Option<&AlphaStore>,
    input_hw: [usize; 2],
    latency: Option<Arc<LatencyTable>>,
) -> Result<CostReport> {
    let cfg = &run.search;
    let st = cfg
        .stages
        .get(stage)
        .ok_or_else(|| Error::Config(format!("no search stage {stage} (config has {})", cfg.stages.len())))?;
    let layout = NetLayout::new(st.depth, cfg.init_channels, cfg.num_classes, input_hw[0], input_hw[1])?;
    let current = match alphas {
        Some(a) => a.clone(),
        None => AlphaStore::new(AlphaTable::full(vec![vec![0.0; 8]; EDGES])?, AlphaTable::full(vec![vec![0.0; 8]; EDGES])?)?,
    };
    let uniform = AlphaStore::new(
        uniform_like(current.table(CellKind::Normal))?,
        uniform_like(current.table(CellKind::Reduce))?,
    )?;
    let at = supernet_expected_costs(&layout, &current, latency.clone())?;
    let un = supernet_expected_costs(&layout, &uniform, latency)?;
    Ok(CostReport {
        schema_version: OUTPUT_SCHEMA_VERSION,
        subject: "supernet".into(),
        depth: st.depth,
        init_channels: cfg.init_channels,
        input_hw,
        network_params: None,
        budget: run.budget,
        meets_budget: None,
        models: at
            .into_iter()
            .zip(un)
            .map(|((name, total), (_, u))| ModelCost {
                name,
                total,
                uniform: Some(u),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub genotype: PathBuf,
    pub runs: Vec<TrainReport>,
    pub mean_val_error: f64,
    /// Sample standard deviation (zero for a single run).
    pub std_val_error: f64,
}

/// `(mean, sample std)` of `v`.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `val_error 2.83% ± 0.05 over 8 runs`, in percentage points.
pub fn format_mean_std(summary: &TrainSummary) -> String {
    format!(
        "val_error {:.2}% ± {:.2} over {} runs",
        100.0 * summary.mean_val_error,
        100.0 * summary.std_val_error,
        summary.runs.len()
    )
}

/// `train`: `repeat` from-scratch runs with seeds `seed, seed + 1, …`;
/// writes `metrics.json` and `metrics.csv`.
pub fn train(genotype_path: &Path, run: &RunConfig, repeat: usize, out: &Path) -> Result<TrainSummary> {
    if repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    let g = Genotype::from_json(&read_input(genotype_path)?)?;
    let validity = g.validity();
    if !validity.is_valid() {
        return Err(Error::Validation(validity.to_string()));
    }
    let splits = run.splits()?;
    let runs = (0..repeat as u64)
        .map(|r| train_from_scratch(&g, &run.train, &splits.train, &splits.val, run.search.seed + r))
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<f64> = runs.iter().map(|r| r.val_error).collect();
    let (mean_val_error, std_val_error) = mean_std(&errors);
    let summary = TrainSummary {
        schema_version: OUTPUT_SCHEMA_VERSION,
        genotype: genotype_path.to_path_buf(),
        runs,
        mean_val_error,
        std_val_error,
    };
    let path = out.join("metrics.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["seed", "val_error", "param_count", "epochs", "final_train_loss"])?;
    for r in &summary.runs {
        w.write_record([
            r.seed.to_string(),
            r.val_error.to_string(),
            r.param_count.to_string(),
            r.epochs.to_string(),
            r.final_train_loss.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&out.join("metrics.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::mean_std;

    #[test]
    fn mean_std_by_hand() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
