use serde::{Deserialize, Serialize};

use super::bilevel::{classification_error, Batch};
use super::config::{TrainConfig, DIVERGENCE_THRESHOLD};
use super::optim::{clip_grad_norm, cosine_lr, Sgd};
use crate::data::{augment, Batches, Dataset};
use crate::engine::{ParamGroup, ParamId, Tape};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::supernet::{EvalNet, Genotype};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub val_error: f64,
    pub param_count: u64,
    pub epochs: usize,
    pub seed: u64,
    /// Mean classification loss over the last epoch (NaN with zero epochs).
    pub final_train_loss: f64,
}

/// Trains the discrete network for `g` from a fresh initialization and
/// reports its error on `val`.
pub fn train_from_scratch(g: &Genotype, cfg: &TrainConfig, train: &Dataset, val: &Dataset, seed: u64) -> Result<TrainReport> {
    cfg.validate()?;
    let validity = g.validity();
    if !validity.is_valid() {
        return Err(Error::Validation(validity.to_string()));
    }
    let mut net = EvalNet::new(g, train.num_classes(), train.height(), train.width(), &mut seeded(derive_seed(seed, 300)))?;
    let ids: Vec<ParamId> = net.store().ids_in(ParamGroup::Network).collect();
    let mut opt = Sgd::new(cfg.optim.momentum, cfg.optim.weight_decay);
    let mut batches = Batches::new(train.len(), cfg.batch_size, derive_seed(seed, 301));
    let mut aug_rng = seeded(derive_seed(seed, 302));
    let steps = batches.per_epoch();
    let mut final_train_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.optim.lr, cfg.optim.lr_min, epoch, cfg.epochs);
        let mut sum = 0.0;
        for step in 0..steps {
            let mut batch = Batch::from_indices(train, batches.next_indices());
            if cfg.augment {
                let (n, h, w) = (batch.len(), batch.h, batch.w);
                augment(&mut batch.images, n, h, w, cfg.augment_pad, &mut aug_rng);
            }
            net.store_mut().zero_grad();
            let mut tape = Tape::tracking(&[ParamGroup::Network]);
            let x = batch.input(&mut tape)?;
            let logits = net.forward(&mut tape, x)?;
            let loss = tape.cross_entropy(logits, &batch.labels)?;
            let l = tape.item(loss)?;
            if !l.is_finite() || l > DIVERGENCE_THRESHOLD {
                return Err(Error::Divergence {
                    stage: 0,
                    epoch,
                    step,
                    loss: l,
                });
            }
            tape.backward_into(loss, net.store_mut())?;
            clip_grad_norm(net.store_mut(), &ids, cfg.optim.grad_clip);
            opt.step(net.store_mut(), &ids, lr);
            sum += l as f64;
        }
        final_train_loss = sum / steps as f64;
    }
    let val_error = classification_error(val, 256, |t, x| net.forward(t, x))?;
    Ok(TrainReport {
        val_error,
        param_count: net.param_count(),
        epochs: cfg.epochs,
        seed,
        final_train_loss,
    })
}
