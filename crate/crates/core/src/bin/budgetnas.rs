use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use budgetnas::gradcheck::{run_gradcheck, run_gradcheck_with, wrong_sign_closed_form, GradCheckConfig};
use budgetnas::harness::{self, DatasetKind, Overrides, RunConfig, SampleSpace, SweepModel};
use budgetnas::supernet::{AlphaStore, Genotype};
use budgetnas::{Error, Result};

#[derive(Parser)]
#[command(name = "budgetnas", version, about = "Resource-aware differentiable architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one progressive search and derive its genotype.
    Search(Common),
    /// Run independent searches over sampled λ values.
    Sweep(SweepArgs),
    /// Derive a genotype from an α snapshot and check its validity.
    Derive(DeriveArgs),
    /// Train a genotype from scratch.
    Train(TrainArgs),
    /// Report resource costs of a genotype or a supernet.
    Cost(CostArgs),
    /// Verify the expected-cost gradient three ways.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration (default: the built-in desk preset).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    lambda_params: Option<f64>,
    #[arg(long)]
    lambda_macs: Option<f64>,
    #[arg(long)]
    lambda_latency: Option<f64>,
    #[arg(long)]
    latency_table: Option<PathBuf>,
    /// Parameter budget.
    #[arg(long)]
    budget: Option<u64>,
    /// Sweep worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Linear,
    Log,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Params,
    Macs,
    Latency,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, allow_hyphen_values = true)]
    low_exp: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    high_exp: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seeds_per_lambda: Option<usize>,
    #[arg(long, value_enum)]
    sample_space: Option<SpaceArg>,
    /// Resource model whose λ is swept.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
}

#[derive(Args)]
struct DeriveArgs {
    #[command(flatten)]
    common: Common,
    /// α snapshot written by `search`.
    #[arg(long)]
    alphas: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    genotype: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Independent runs with seeds seed, seed+1, …
    #[arg(long, default_value_t = 1)]
    repeat: usize,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    common: Common,
    /// Genotype to cost; without it the configured supernet is costed.
    #[arg(long, conflicts_with_all = ["alphas", "stage"])]
    genotype: Option<PathBuf>,
    /// α snapshot for the supernet report (default: uniform).
    #[arg(long)]
    alphas: Option<PathBuf>,
    /// Search stage whose supernet is costed.
    #[arg(long)]
    stage: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1024)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Test fixture: negate the closed form to show failures are caught.
    #[arg(long, hide = true)]
    flip_sign: bool,
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut run = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    run.apply(&Overrides {
        seed: common.seed,
        dataset: common.dataset.map(|d| match d {
            DatasetArg::Synthetic => DatasetKind::Synthetic,
            DatasetArg::Cifar10 => DatasetKind::Cifar10,
        }),
        data_dir: common.data_dir.clone(),
        lambda_params: common.lambda_params,
        lambda_macs: common.lambda_macs,
        lambda_latency: common.lambda_latency,
        latency_table: common.latency_table.clone(),
        budget: common.budget,
        workers: common.workers,
    })?;
    Ok(run)
}

fn input_hw(run: &RunConfig) -> [usize; 2] {
    match run.data.dataset {
        DatasetKind::Synthetic => [budgetnas::data::DESK_SIDE; 2],
        DatasetKind::Cifar10 => [budgetnas::data::CIFAR_SIDE; 2],
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))
}

fn write_report<T: serde::Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let path = out.join(name);
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

/// Runs a command; `Ok(false)` means it ran but reported failures.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Search(common) => {
            let run = load(&common)?;
            let s = harness::search(&run, &common.out)?;
            println!("status: {:?}", s.status);
            println!("validity: {}", s.validity);
            if let Some(n) = s.derived_param_count {
                println!("derived_param_count: {n} (budget {}, meets_budget {})", s.budget, s.meets_budget);
            }
            for (name, v) in &s.final_costs {
                println!("C_{name}: {v}");
            }
            println!("resource_loss: {}", s.resource_loss);
            if let Some(d) = &s.divergence {
                println!("divergence: {d}");
            }
        }
        Command::Sweep(a) => {
            let mut run = load(&a.common)?;
            let sc = &mut run.sweep;
            if let Some(v) = a.low_exp {
                sc.lambda_low_exp = v;
            }
            if let Some(v) = a.high_exp {
                sc.lambda_high_exp = v;
            }
            if let Some(v) = a.samples {
                sc.num_samples = v;
            }
            if let Some(v) = a.seeds_per_lambda {
                sc.seeds_per_lambda = v;
            }
            if let Some(v) = a.sample_space {
                sc.sample_space = match v {
                    SpaceArg::Linear => SampleSpace::Linear,
                    SpaceArg::Log => SampleSpace::Log,
                };
            }
            if let Some(v) = a.model {
                sc.model = match v {
                    ModelArg::Params => SweepModel::Params,
                    ModelArg::Macs => SweepModel::Macs,
                    ModelArg::Latency => SweepModel::Latency,
                };
            }
            run.validate()?;
            let rows = harness::sweep(&run, &a.common.out)?;
            let meets = rows.iter().filter(|r| r.meets_budget).count();
            println!("{} trials, {meets} within budget {}", rows.len(), run.budget);
        }
        Command::Derive(a) => {
            let run = load(&a.common)?;
            let (g, rep) = harness::derive(&a.alphas, &run, &a.common.out)?;
            println!("{g}");
            println!("{}", rep.validity);
            println!("derived_param_count: {}", rep.derived_param_count);
        }
        Command::Train(a) => {
            let mut run = load(&a.common)?;
            if let Some(e) = a.epochs {
                run.train.epochs = e;
            }
            let s = harness::train(&a.genotype, &run, a.repeat, &a.common.out)?;
            for r in &s.runs {
                println!(
                    "seed {} val_error {} param_count {} epochs {}",
                    r.seed, r.val_error, r.param_count, r.epochs
                );
            }
            println!("{}", harness::format_mean_std(&s));
        }
        Command::Cost(a) => {
            let run = load(&a.common)?;
            let latency = run.latency()?;
            let hw = input_hw(&run);
            let rep = match &a.genotype {
                Some(p) => {
                    let g = Genotype::from_json(&read(p)?)?;
                    harness::cost_genotype(&g, run.search.num_classes, hw, latency, run.budget)?
                }
                None => {
                    let alphas = match &a.alphas {
                        Some(p) => Some(AlphaStore::from_json(&read(p)?)?),
                        None => None,
                    };
                    harness::cost_supernet(&run, a.stage.unwrap_or(0), alphas.as_ref(), hw, latency)?
                }
            };
            if let Some(n) = rep.network_params {
                println!("network_params: {n}");
            }
            for m in &rep.models {
                match m.uniform {
                    Some(u) => println!("{}: {} (uniform {u})", m.name, m.total),
                    None => println!("{}: {}", m.name, m.total),
                }
            }
            if let Some(ok) = rep.meets_budget {
                println!("budget {}: {}", rep.budget, if ok { "pass" } else { "fail" });
            }
            write_report(&a.common.out, "cost.json", &rep)?;
        }
        Command::Gradcheck(a) => {
            let cfg = GradCheckConfig {
                cases: a.cases,
                seed: a.seed,
                ..GradCheckConfig::default()
            };
            let rep = if a.flip_sign {
                run_gradcheck_with(&cfg, wrong_sign_closed_form)?
            } else {
                run_gradcheck(&cfg)?
            };
            println!(
                "{} cases + singleton, {} failures; max rel err closed/auto {:.2e}, closed/fd {:.2e}, auto/fd {:.2e}; max |Σ grad| {:.2e}",
                rep.cases, rep.failures, rep.max_closed_vs_auto, rep.max_closed_vs_fd, rep.max_auto_vs_fd, rep.max_abs_sum
            );
            write_report(&a.out, "gradcheck.json", &rep)?;
            println!("{}", if rep.passed() { "PASS" } else { "FAIL" });
            return Ok(rep.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
