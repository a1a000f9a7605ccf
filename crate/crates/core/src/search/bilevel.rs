//! First-order alternating optimization of α (val split, full loss) and θ
//! (train split, classification loss), run over a progressive schedule.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{SearchConfig, StageConfig, DIVERGENCE_THRESHOLD};
use super::optim::{clip_grad_norm, cosine_lr, Adam, Sgd};
use super::prune::prune_ops;
use crate::cost::{LatencyTable, MacCost, ParamCost, ResourceCost};
use crate::data::{augment, Batches, Dataset, Splits};
use crate::engine::{ParamGroup, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::supernet::{derive_genotype, reachable_specs, AlphaStore, CellKind, Genotype, NetLayout, SuperNet, SuperNetConfig, Validity};

/// Where in the schedule a step runs; attached to divergence errors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepPosition {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
}

/// A mini-batch of normalized images.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub h: usize,
    pub w: usize,
}

impl Batch {
    pub fn from_indices(ds: &Dataset, indices: &[usize]) -> Self {
        let (images, labels) = ds.gather(indices);
        Batch {
            images,
            labels,
            h: ds.height(),
            w: ds.width(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub(crate) fn input(&self, tape: &mut Tape) -> Result<Var> {
        tape.constant(vec![self.len(), Dataset::CHANNELS, self.h, self.w], self.images.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// Classification loss on the θ batch.
    pub train_loss: f32,
    /// Classification loss on the α batch (NaN when α was not updated).
    pub val_loss: f32,
    /// Full objective on the α batch, including resource terms.
    pub objective: f32,
}

/// The two optimizers of a search stage.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub theta: Sgd,
    pub alpha: Adam,
    pub grad_clip: f64,
}

impl Optimizers {
    pub fn new(cfg: &SearchConfig) -> Self {
        Optimizers {
            theta: Sgd::new(cfg.theta.momentum, cfg.theta.weight_decay),
            alpha: Adam::new(cfg.alpha.lr, cfg.alpha.beta1, cfg.alpha.beta2, cfg.alpha.weight_decay),
            grad_clip: cfg.theta.grad_clip,
        }
    }
}

fn check_loss(loss: f32, at: StepPosition) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
        return Err(Error::Divergence {
            stage: at.stage,
            epoch: at.epoch,
            step: at.step,
            loss,
        });
    }
    Ok(())
}

/// `L1 + Σ λ_m C_m` on the tape. Models with λ = 0 add no node at all, so the
/// objective is then the classification loss itself.
pub fn objective(tape: &mut Tape, l1: Var, costs: &[Var], lambdas: &[f64]) -> Result<Var> {
    if costs.len() != lambdas.len() {
        return Err(Error::Config(format!(
            "{} cost models but {} lambdas",
            costs.len(),
            lambdas.len()
        )));
    }
    let mut total = l1;
    for (&c, &lambda) in costs.iter().zip(lambdas) {
        if lambda != 0.0 {
            let term = tape.mul_scalar(c, lambda as f32);
            total = tape.add(total, term)?;
        }
    }
    Ok(total)
}

fn ids(net: &SuperNet, group: ParamGroup) -> Vec<ParamId> {
    net.store().ids_in(group).collect()
}

/// Gradient of the full objective on `batch`, into α only. Returns
/// `(L1, objective)`.
pub fn alpha_gradient(net: &mut SuperNet, batch: &Batch, lambdas: &[f64]) -> Result<(f32, f32)> {
    net.store_mut().zero_grad();
    let mut tape = Tape::tracking(&[ParamGroup::Architecture]);
    let x = batch.input(&mut tape)?;
    let out = net.forward(&mut tape, x)?;
    let l1 = tape.cross_entropy(out.logits, &batch.labels)?;
    let total = objective(&mut tape, l1, &out.costs, lambdas)?;
    tape.backward_into(total, net.store_mut())?;
    Ok((tape.item(l1)?, tape.item(total)?))
}

/// Gradient of the classification loss on `batch`, into θ only.
pub fn theta_gradient(net: &mut SuperNet, batch: &Batch) -> Result<f32> {
    net.store_mut().zero_grad();
    let mut tape = Tape::tracking(&[ParamGroup::Network]);
    let x = batch.input(&mut tape)?;
    let out = net.forward(&mut tape, x)?;
    let l1 = tape.cross_entropy(out.logits, &batch.labels)?;
    tape.backward_into(l1, net.store_mut())?;
    tape.item(l1)
}

/// One α update on `val` (skipped when `None`) followed by one θ update on
/// `train`.
pub fn alternate_step(
    net: &mut SuperNet,
    opt: &mut Optimizers,
    train: &Batch,
    val: Option<&Batch>,
    lambdas: &[f64],
    theta_lr: f64,
    at: StepPosition,
) -> Result<StepMetrics> {
    let (mut val_loss, mut objective) = (f32::NAN, f32::NAN);
    if let Some(val) = val {
        let (l1, total) = alpha_gradient(net, val, lambdas)?;
        // The penalty scales with λ, so only the data term has a magnitude bound.
        check_loss(l1, at)?;
        if !total.is_finite() {
            check_loss(total, at)?;
        }
        let alpha_ids = ids(net, ParamGroup::Architecture);
        opt.alpha.step(net.store_mut(), &alpha_ids);
        (val_loss, objective) = (l1, total);
    }
    let train_loss = theta_gradient(net, train)?;
    check_loss(train_loss, at)?;
    let theta_ids = ids(net, ParamGroup::Network);
    clip_grad_norm(net.store_mut(), &theta_ids, opt.grad_clip);
    opt.theta.step(net.store_mut(), &theta_ids, theta_lr);
    net.store_mut().zero_grad();
    Ok(StepMetrics {
        train_loss,
        val_loss,
        objective,
    })
}

/// Per-epoch search log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Expected cost per model name, in registration order.
    pub costs: Vec<(String, f64)>,
    pub alpha_digest: String,
}

impl EpochRecord {
    pub fn cost(&self, name: &str) -> Option<f64> {
        self.costs.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Runs `stage.epochs` sweeps of alternating steps over the search splits.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    net: &mut SuperNet,
    cfg: &SearchConfig,
    stage_index: usize,
    stage: &StageConfig,
    splits: &Splits,
    lambdas: &[f64],
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    let mut opt = Optimizers::new(cfg);
    let mut train_batches = Batches::new(splits.search_train.len(), stage.batch_size, derive_seed(seed, 1));
    let mut val_batches = Batches::new(splits.search_val.len(), stage.batch_size, derive_seed(seed, 2));
    let mut aug_rng = seeded(derive_seed(seed, 3));
    let steps = train_batches.per_epoch();
    let mut log = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        let lr = cosine_lr(cfg.theta.lr, cfg.theta.lr_min, epoch, stage.epochs);
        let (mut tl, mut vl) = (0.0f64, 0.0f64);
        for step in 0..steps {
            let mut train = Batch::from_indices(&splits.search_train, train_batches.next_indices());
            if cfg.augment {
                let (n, h, w) = (train.len(), train.h, train.w);
                augment(&mut train.images, n, h, w, cfg.augment_pad, &mut aug_rng);
            }
            let val = Batch::from_indices(&splits.search_val, val_batches.next_indices());
            let at = StepPosition {
                stage: stage_index,
                epoch,
                step,
            };
            let m = alternate_step(net, &mut opt, &train, Some(&val), lambdas, lr, at)?;
            tl += m.train_loss as f64;
            vl += m.val_loss as f64;
        }
        let costs = net.expected_costs()?;
        log.push(EpochRecord {
            stage: stage_index,
            epoch,
            train_loss: tl / steps as f64,
            val_loss: vl / steps as f64,
            costs: net.model_names().iter().cloned().zip(costs).collect(),
            alpha_digest: net.alphas()?.digest(),
        });
    }
    Ok(log)
}

/// Outcome of a full progressive search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub genotype: Genotype,
    pub validity: Validity,
    pub final_costs: Vec<(String, f64)>,
    pub history: Vec<EpochRecord>,
    pub alphas: AlphaStore,
    /// Classification error of the final supernet on the α split.
    pub search_val_error: f64,
}

impl SearchResult {
    pub fn valid(&self) -> bool {
        self.validity.is_valid()
    }
}

/// Cost models a search registers: parameters and MACs always, latency when
/// a table is supplied.
pub fn cost_models(latency: Option<Arc<LatencyTable>>) -> Vec<Arc<dyn ResourceCost>> {
    let mut m: Vec<Arc<dyn ResourceCost>> = vec![Arc::new(ParamCost), Arc::new(MacCost)];
    if let Some(t) = latency {
        m.push(t);
    }
    m
}

fn supernet_config(cfg: &SearchConfig, depth: usize, ds: &Dataset) -> SuperNetConfig {
    SuperNetConfig {
        depth,
        init_channels: cfg.init_channels,
        num_classes: cfg.num_classes,
        input_h: ds.height(),
        input_w: ds.width(),
    }
}

/// Classification error of `forward` over `ds`, in batches of `batch_size`.
pub(crate) fn classification_error(
    ds: &Dataset,
    batch_size: usize,
    mut forward: impl FnMut(&mut Tape, Var) -> Result<Var>,
) -> Result<f64> {
    let mut wrong = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(2)) {
        // A singleton tail would give batch norm one sample per channel.
        let chunk = if chunk.len() == 1 { &idx[idx.len() - 2..] } else { chunk };
        let batch = Batch::from_indices(ds, chunk);
        let mut tape = Tape::tracking(&[]);
        let x = batch.input(&mut tape)?;
        let logits = forward(&mut tape, x)?;
        let k = tape.shape(logits)[1];
        for (row, &label) in tape.value(logits).chunks(k).zip(&batch.labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            if pred != label {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / ds.len() as f64)
}

/// Full progressive search: each stage prunes candidates, builds a fresh
/// supernet of the stage's depth around the carried α, and trains it.
pub fn run_search(cfg: &SearchConfig, splits: &Splits, latency: Option<Arc<LatencyTable>>) -> Result<SearchResult> {
    cfg.validate()?;
    let lambdas_all = cfg.lambda_vector();
    if lambdas_all[2] > 0.0 && latency.is_none() {
        return Err(Error::Config("a latency lambda needs a latency table".into()));
    }
    let ds = &splits.search_train;
    if ds.num_classes() != cfg.num_classes {
        return Err(Error::Config(format!(
            "config expects {} classes, data has {}",
            cfg.num_classes,
            ds.num_classes()
        )));
    }
    if let Some(t) = &latency {
        let mut required = Vec::new();
        for s in &cfg.stages {
            let layout = NetLayout::new(s.depth, cfg.init_channels, cfg.num_classes, ds.height(), ds.width())?;
            required.extend(reachable_specs(&layout));
        }
        t.check_coverage(&required)?;
    }
    let models = cost_models(latency);
    let lambdas = &lambdas_all[..models.len()];

    let mut alphas = AlphaStore::init(&mut seeded(derive_seed(cfg.seed, 100)));
    let mut history = Vec::with_capacity(cfg.total_epochs());
    let mut last: Option<SuperNet> = None;
    for (i, stage) in cfg.stages.iter().enumerate() {
        alphas = prune_ops(&alphas, stage.ops_kept.min(alphas.k()))?;
        let stage_seed = derive_seed(cfg.seed, 200 + i as u64);
        let mut net = SuperNet::new(supernet_config(cfg, stage.depth, ds), &alphas, &models, &mut seeded(stage_seed))?;
        history.extend(run_stage(&mut net, cfg, i, stage, splits, lambdas, stage_seed)?);
        alphas = net.alphas()?;
        last = Some(net);
    }
    let net = last.expect("at least one stage");
    let final_costs = net.model_names().iter().cloned().zip(net.expected_costs()?).collect();
    let batch = cfg.stages.last().map_or(64, |s| s.batch_size.max(64));
    let search_val_error = classification_error(&splits.search_val, batch, |t, x| Ok(net.forward(t, x)?.logits))?;
    let genotype = derive_genotype(&alphas, cfg.eval_channels, cfg.eval_depth);
    Ok(SearchResult {
        validity: genotype.validity(),
        genotype,
        final_costs,
        history,
        alphas,
        search_val_error,
    })
}

/// Softmax weight of `kind` on every edge of the given cell type.
pub fn op_weight(alphas: &AlphaStore, cell: CellKind, kind: crate::primitives::PrimitiveKind) -> Vec<f64> {
    let t = alphas.table(cell);
    (0..crate::supernet::EDGES)
        .map(|e| {
            let p = t.probs(e);
            t.ops(e).iter().position(|&k| k == kind).map_or(0.0, |i| p[i])
        })
        .collect()
}
