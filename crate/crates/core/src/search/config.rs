use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::PrimitiveKind;

/// One phase of the progressive schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub depth: usize,
    pub ops_kept: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

/// SGD with momentum on θ, cosine-annealed per stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaOptimConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

/// Adam on α with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaOptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

/// λ per resource model; zero disables a model's penalty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    #[serde(default)]
    pub params: f64,
    #[serde(default)]
    pub macs: f64,
    #[serde(default)]
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub seed: u64,
    pub init_channels: usize,
    pub num_classes: usize,
    pub stages: Vec<StageConfig>,
    pub theta: ThetaOptimConfig,
    pub alpha: AlphaOptimConfig,
    #[serde(default)]
    pub lambdas: Lambdas,
    /// Size of the network a derived genotype is evaluated at.
    pub eval_depth: usize,
    pub eval_channels: usize,
    /// Crop-and-flip on θ batches.
    #[serde(default)]
    pub augment: bool,
    #[serde(default = "default_pad")]
    pub augment_pad: usize,
}

fn default_pad() -> usize {
    4
}

pub const DIVERGENCE_THRESHOLD: f32 = 1e4;

impl ThetaOptimConfig {
    pub fn standard() -> Self {
        ThetaOptimConfig {
            lr: 0.025,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
        }
    }
}

impl AlphaOptimConfig {
    pub fn standard() -> Self {
        AlphaOptimConfig {
            lr: 6e-4,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 1e-3,
        }
    }
}

impl SearchConfig {
    /// CPU-minutes schedule on the 8×8 synthetic task.
    pub fn desk() -> Self {
        let stage = |depth, ops_kept| StageConfig {
            depth,
            ops_kept,
            epochs: 5,
            batch_size: 32,
        };
        SearchConfig {
            seed: 0,
            init_channels: 4,
            num_classes: 10,
            stages: vec![stage(2, 8), stage(3, 5), stage(4, 3)],
            theta: ThetaOptimConfig::standard(),
            alpha: AlphaOptimConfig::standard(),
            lambdas: Lambdas::default(),
            eval_depth: 8,
            eval_channels: 16,
            augment: false,
            augment_pad: 1,
        }
    }

    /// Depths 5 → 11 → 17 on CIFAR-10.
    pub fn paper() -> Self {
        let stage = |depth, ops_kept| StageConfig {
            depth,
            ops_kept,
            epochs: 25,
            batch_size: 64,
        };
        SearchConfig {
            seed: 0,
            init_channels: 16,
            num_classes: 10,
            stages: vec![stage(5, 8), stage(11, 5), stage(17, 3)],
            theta: ThetaOptimConfig::standard(),
            alpha: AlphaOptimConfig::standard(),
            lambdas: Lambdas::default(),
            eval_depth: 20,
            eval_channels: 36,
            augment: true,
            augment_pad: 4,
        }
    }

    pub fn lambda_vector(&self) -> [f64; 3] {
        [self.lambdas.params, self.lambdas.macs, self.lambdas.latency]
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth < 2 {
                return bad(format!("stage {i}: depth must be at least 2, got {}", s.depth));
            }
            if s.ops_kept == 0 || s.ops_kept > PrimitiveKind::ALL.len() {
                return bad(format!("stage {i}: ops_kept must be in 1..=8, got {}", s.ops_kept));
            }
            if s.batch_size < 2 {
                return bad(format!("stage {i}: batch_size must be at least 2"));
            }
            if i > 0 {
                let p = &self.stages[i - 1];
                if s.ops_kept > p.ops_kept {
                    return bad(format!("stage {i}: ops_kept may not increase ({} -> {})", p.ops_kept, s.ops_kept));
                }
                if s.depth < p.depth {
                    return bad(format!("stage {i}: depth may not decrease ({} -> {})", p.depth, s.depth));
                }
            }
        }
        let t = &self.theta;
        if !(t.lr > 0.0 && t.lr_min >= 0.0 && t.lr_min <= t.lr) {
            return bad(format!("theta lr {} / lr_min {} must satisfy 0 <= lr_min <= lr, lr > 0", t.lr, t.lr_min));
        }
        if !(0.0..1.0).contains(&t.momentum) || t.weight_decay < 0.0 || t.grad_clip <= 0.0 {
            return bad("theta momentum must be in [0,1), weight_decay >= 0, grad_clip > 0".into());
        }
        let a = &self.alpha;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.weight_decay < 0.0 {
            return bad("alpha lr must be > 0, betas in [0,1), weight_decay >= 0".into());
        }
        for (name, l) in [("params", self.lambdas.params), ("macs", self.lambdas.macs), ("latency", self.lambdas.latency)] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda {name} must be finite and non-negative, got {l}"));
            }
        }
        if self.init_channels == 0 || self.num_classes < 2 || self.eval_channels == 0 || self.eval_depth < 2 {
            return bad("channels must be positive, num_classes >= 2, eval_depth >= 2".into());
        }
        Ok(())
    }
}

/// Hyper-parameters of from-scratch training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: ThetaOptimConfig,
    #[serde(default)]
    pub augment: bool,
    #[serde(default = "default_pad")]
    pub augment_pad: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            optim: ThetaOptimConfig {
                lr: 0.05,
                ..ThetaOptimConfig::standard()
            },
            augment: false,
            augment_pad: 1,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            epochs: 600,
            batch_size: 96,
            optim: ThetaOptimConfig {
                lr: 0.025,
                lr_min: 0.0,
                ..ThetaOptimConfig::standard()
            },
            augment: true,
            augment_pad: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("training batch_size must be at least 2".into()));
        }
        let t = &self.optim;
        if !(t.lr > 0.0 && t.lr_min >= 0.0 && t.lr_min <= t.lr && (0.0..1.0).contains(&t.momentum)) {
            return Err(Error::Config("invalid training optimizer settings".into()));
        }
        Ok(())
    }
}
