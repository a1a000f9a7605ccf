//! Three-way check of the expected-cost gradient: the closed form against
//! reverse-mode autodiff on the tape and against central differences.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cost::{expected_cost, expected_cost_grad, softmax_f64};
use crate::engine::{rel_err, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const GRADCHECK_SCHEMA_VERSION: u32 = 1;

/// Signature of a closed-form gradient `(p, costs) -> ∂C/∂α`.
pub type ClosedForm = fn(&[f64], &[f64]) -> Vec<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub cases: usize,
    pub ks: Vec<usize>,
    pub rel_tol: f64,
    pub sum_tol: f64,
    pub fd_step: f64,
    pub max_cost: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            cases: 1024,
            ks: vec![2, 3, 5, 8],
            rel_tol: 1e-4,
            sum_tol: 1e-9,
            fd_step: 1e-5,
            max_cost: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub k: usize,
    pub closed_vs_auto: f64,
    pub closed_vs_fd: f64,
    pub auto_vs_fd: f64,
    pub sum: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub schema_version: u32,
    pub config: GradCheckConfig,
    pub cases: usize,
    pub failures: usize,
    pub max_closed_vs_auto: f64,
    pub max_closed_vs_fd: f64,
    pub max_auto_vs_fd: f64,
    pub max_abs_sum: f64,
    /// The singleton edge, checked separately: its gradient must be zero.
    pub singleton: CaseResult,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Gradient of `Σ softmax(α)_i c_i` by reverse mode on the tape (f32).
pub fn autodiff_grad(alpha: &[f64], costs: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let t = Tensor::new(vec![alpha.len()], alpha.iter().map(|&v| v as f32).collect())?;
    let a = tape.leaf(t.with_requires_grad(true));
    let p = tape.softmax(a)?;
    let c: Vec<f32> = costs.iter().map(|&v| v as f32).collect();
    let e = tape.dot_const(p, &c)?;
    let g = tape.backward(e)?;
    let ga = g.get(a).ok_or_else(|| Error::Numeric {
        op: "gradcheck",
        detail: "no gradient reached α".into(),
    })?;
    Ok(ga.iter().map(|&v| v as f64).collect())
}

/// Central differences of the expected cost in α (f64).
pub fn finite_difference_grad(alpha: &[f64], costs: &[f64], h: f64) -> Vec<f64> {
    let mut a = alpha.to_vec();
    (0..alpha.len())
        .map(|i| {
            a[i] = alpha[i] + h;
            let up = expected_cost(&softmax_f64(&a), costs);
            a[i] = alpha[i] - h;
            let down = expected_cost(&softmax_f64(&a), costs);
            a[i] = alpha[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn pairwise(a: &[f64], b: &[f64], floor: f64) -> f64 {
    rel_err(a, b, floor).max(rel_err(b, a, floor))
}

/// Checks one `(α, costs)` pair against all three routes.
pub fn check_case(alpha: &[f64], costs: &[f64], cfg: &GradCheckConfig, closed_form: ClosedForm) -> Result<CaseResult> {
    if alpha.len() != costs.len() || alpha.is_empty() {
        return Err(Error::dim("gradcheck", format!("{} logits, {} costs", alpha.len(), costs.len())));
    }
    let p = softmax_f64(alpha);
    let closed = closed_form(&p, costs);
    let auto = autodiff_grad(alpha, costs)?;
    let fd = finite_difference_grad(alpha, costs, cfg.fd_step);
    // Components below f32 resolution of the largest cost count as zero.
    let floor = 1e-3 * costs.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let closed_vs_auto = pairwise(&closed, &auto, floor);
    let closed_vs_fd = pairwise(&closed, &fd, floor);
    let auto_vs_fd = pairwise(&auto, &fd, floor);
    let sum: f64 = closed.iter().sum();
    let passed = closed_vs_auto <= cfg.rel_tol
        && closed_vs_fd <= cfg.rel_tol
        && auto_vs_fd <= cfg.rel_tol
        && sum.abs() <= cfg.sum_tol;
    Ok(CaseResult {
        k: alpha.len(),
        closed_vs_auto,
        closed_vs_fd,
        auto_vs_fd,
        sum,
        passed,
    })
}

/// Runs the triangle over `cfg.cases` random cases spread evenly across
/// `cfg.ks`, plus the singleton edge.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    run_gradcheck_with(cfg, expected_cost_grad)
}

/// As [`run_gradcheck`] with a substitute closed form, so the harness itself
/// can be shown to catch a broken formula.
pub fn run_gradcheck_with(cfg: &GradCheckConfig, closed_form: ClosedForm) -> Result<GradCheckReport> {
    if cfg.ks.is_empty() || cfg.ks.contains(&0) {
        return Err(Error::Config("gradcheck needs candidate counts ≥ 1".into()));
    }
    if !(cfg.max_cost >= 1.0 && cfg.fd_step > 0.0) {
        return Err(Error::Config("gradcheck needs max_cost ≥ 1 and a positive step".into()));
    }
    let mut rng = seeded(cfg.seed);
    let log_max = cfg.max_cost.log10();
    let mut report = GradCheckReport {
        schema_version: GRADCHECK_SCHEMA_VERSION,
        config: cfg.clone(),
        cases: 0,
        failures: 0,
        max_closed_vs_auto: 0.0,
        max_closed_vs_fd: 0.0,
        max_auto_vs_fd: 0.0,
        max_abs_sum: 0.0,
        singleton: check_case(&[0.7], &[123.0], cfg, closed_form)?,
    };
    if !report.singleton.passed {
        report.failures += 1;
    }
    for i in 0..cfg.cases {
        let k = cfg.ks[i % cfg.ks.len()];
        let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        // Parameter-free ops cost nothing; the rest span several decades.
        let costs: Vec<f64> = (0..k)
            .map(|_| {
                if rng.random_bool(0.25) {
                    0.0
                } else {
                    10f64.powf(rng.random_range(0.0..log_max))
                }
            })
            .collect();
        let r = check_case(&alpha, &costs, cfg, closed_form)?;
        report.cases += 1;
        if !r.passed {
            report.failures += 1;
        }
        report.max_closed_vs_auto = report.max_closed_vs_auto.max(r.closed_vs_auto);
        report.max_closed_vs_fd = report.max_closed_vs_fd.max(r.closed_vs_fd);
        report.max_auto_vs_fd = report.max_auto_vs_fd.max(r.auto_vs_fd);
        report.max_abs_sum = report.max_abs_sum.max(r.sum.abs());
    }
    Ok(report)
}

/// The closed form with its sign flipped; used to exercise failure paths.
pub fn wrong_sign_closed_form(p: &[f64], costs: &[f64]) -> Vec<f64> {
    expected_cost_grad(p, costs).into_iter().map(|g| -g).collect()
}
