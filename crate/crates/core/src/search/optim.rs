//! Optimizers over subsets of a [`ParamStore`].

use crate::engine::{ParamId, ParamStore};

/// Cosine annealing from `base` at epoch 0 to `min` at `total`.
pub fn cosine_lr(base: f64, min: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = epoch as f64 / total as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

fn grad_of(store: &ParamStore, id: ParamId) -> Option<Vec<f32>> {
    store.get(id).grad().map(<[f32]>::to_vec)
}

/// Rescales gradients of `ids` so their joint L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, ids: &[ParamId], max: f64) -> f64 {
    let norm = ids
        .iter()
        .filter_map(|&id| store.get(id).grad())
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = (max / (norm + 1e-6)) as f32;
        for &id in ids {
            if let Some(g) = grad_of(store, id) {
                let t = store.get_mut(id);
                t.zero_grad();
                t.accumulate_grad(&g.iter().map(|v| v * s).collect::<Vec<_>>());
            }
        }
    }
    norm
}

/// SGD with heavy-ball momentum and coupled weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f32,
    weight_decay: f32,
    bufs: Vec<Option<Vec<f32>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            bufs: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) {
        let lr = lr as f32;
        for &id in ids {
            let Some(g) = grad_of(store, id) else { continue };
            if self.bufs.len() <= id.index() {
                self.bufs.resize(id.index() + 1, None);
            }
            let t = store.get_mut(id);
            let buf = self.bufs[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
            for ((w, b), gi) in t.data_mut().iter_mut().zip(buf.iter_mut()).zip(&g) {
                let d = gi + self.weight_decay * *w;
                *b = self.momentum * *b + d;
                *w -= lr * *b;
            }
        }
    }
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f32,
    eps: f64,
    t: i32,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            weight_decay: weight_decay as f32,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for &id in ids {
            let Some(g) = grad_of(store, id) else { continue };
            if self.moments.len() <= id.index() {
                self.moments.resize(id.index() + 1, None);
            }
            let t = store.get_mut(id);
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, mi), vi), gi) in t.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g) {
                let d = gi + self.weight_decay * *w;
                *mi = b1 * *mi + (1.0 - b1) * d;
                *vi = b2 * *vi + (1.0 - b2) * d * d;
                let mhat = *mi as f64 / bc1;
                let vhat = *vi as f64 / bc2;
                *w -= (self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }
}
