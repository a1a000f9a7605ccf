//! Bilevel search over the supernet, the progressive schedule, and
//! from-scratch training of derived genotypes.

mod bilevel;
mod config;
pub mod optim;
mod prune;
mod scratch;

pub use bilevel::{
    alpha_gradient, alternate_step, cost_models, objective, op_weight, run_search, run_stage, theta_gradient, Batch,
    EpochRecord, Optimizers, SearchResult, StepMetrics, StepPosition,
};
pub use config::{AlphaOptimConfig, Lambdas, SearchConfig, StageConfig, ThetaOptimConfig, TrainConfig, DIVERGENCE_THRESHOLD};
pub use prune::prune_ops;
pub use scratch::{train_from_scratch, TrainReport};
