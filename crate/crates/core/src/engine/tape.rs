//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the adjoint. Nodes only reference earlier nodes, so walking the
//! tape backwards visits each node after all of its consumers.

use super::conv::{self, ConvConfig, ConvGeom};
use super::pool::{self, PoolGeom};
use super::tensor::{numel, ParamGroup, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    MaxPool {
        x: usize,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: usize,
        geom: PoolGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Relu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    MulScalar {
        x: usize,
        c: f32,
    },
    Scale {
        x: usize,
        s: usize,
    },
    Select {
        x: usize,
        index: usize,
    },
    Row {
        x: usize,
        row: usize,
    },
    Softmax {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Sum {
        x: usize,
    },
    DotConst {
        x: usize,
        c: Vec<f32>,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    GlobalAvgPool {
        x: usize,
    },
    Concat {
        xs: Vec<usize>,
    },
    Shift {
        x: usize,
        dy: usize,
        dx: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Ordered record of executed operations for one forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    track_network: bool,
    track_architecture: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients of a scalar with respect to every leaf that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient for a leaf variable; `None` for leaves that did not require it
    /// and for intermediate nodes.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn acc(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            track_network: true,
            track_architecture: true,
        }
    }

    /// A tape that only differentiates with respect to the listed groups.
    pub fn tracking(groups: &[ParamGroup]) -> Self {
        Tape {
            nodes: Vec::new(),
            track_network: groups.contains(&ParamGroup::Network),
            track_architecture: groups.contains(&ParamGroup::Architecture),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Records `t` as an input leaf; it requires grad iff `t` does.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// Records a parameter from `store`; gradients flow back to it only when
    /// its group is tracked by this tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let tracked = match store.group(id) {
            ParamGroup::Network => self.track_network,
            ParamGroup::Architecture => self.track_architecture,
        };
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            tracked && t.requires_grad(),
        );
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape invariant")
    }

    pub fn item(&self, v: Var) -> Result<f32> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!("item() on shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, cfg: ConvConfig) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), cfg)?;
        let out = conv::forward(&geom, self.value(x), self.value(w));
        let rg = self.rg(x.0) || self.rg(w.0);
        Ok(self.push(geom.out_shape(), out, Op::Conv { x: x.0, w: w.0, geom }, rg))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = PoolGeom::new("max_pool2d", self.shape(x), k, stride, padding)?;
        let (out, argmax) = pool::max_forward(&geom, self.value(x));
        let rg = self.rg(x.0);
        Ok(self.push(geom.out_shape(), out, Op::MaxPool { x: x.0, argmax }, rg))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = PoolGeom::new("avg_pool2d", self.shape(x), k, stride, padding)?;
        let out = pool::avg_forward(&geom, self.value(x));
        let rg = self.rg(x.0);
        Ok(self.push(geom.out_shape(), out, Op::AvgPool { x: x.0, geom }, rg))
    }

    /// Training-mode batch normalization over (N, H, W) per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("batch_norm", format!("input must be [N,C,H,W], got {shape:?}")));
        }
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::dim(
                    "batch_norm",
                    format!("{name} shape {:?} != [C] = [{c}] (input axis 1)", self.shape(v)),
                ));
            }
        }
        let m = n * plane;
        if m < 2 {
            return Err(Error::DegenerateBatch { count: m });
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0f32; xs.len()];
        let mut out = vec![0.0f32; xs.len()];
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            for i in 0..n {
                sum += xs[(i * c + ch) * plane..][..plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            let mean = sum / m as f64;
            let mut var = 0.0f64;
            for i in 0..n {
                var += xs[(i * c + ch) * plane..][..plane]
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>();
            }
            let istd = 1.0 / (var / m as f64 + eps as f64).sqrt();
            inv_std[ch] = istd as f32;
            let (mean, istd) = (mean as f32, istd as f32);
            for i in 0..n {
                let o = (i * c + ch) * plane;
                for j in o..o + plane {
                    let h = (xs[j] - mean) * istd;
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        let op = Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            inv_std,
        };
        Ok(self.push(shape, out, op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push(shape, out, Op::Relu { x: x.0 }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push(shape, out, Op::MulScalar { x: x.0, c }, rg)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim(
                "scale",
                format!("scale factor must have one element, got shape {:?}", self.shape(s)),
            ));
        }
        let f = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * f).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0) || self.rg(s.0);
        Ok(self.push(shape, out, Op::Scale { x: x.0, s: s.0 }, rg))
    }

    /// Element `index` of a 1-D tensor, as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        if self.shape(x).len() != 1 || index >= self.shape(x)[0] {
            return Err(Error::dim(
                "select",
                format!("index {index} out of range for shape {:?}", self.shape(x)),
            ));
        }
        let v = self.value(x)[index];
        let rg = self.rg(x.0);
        Ok(self.push(Vec::new(), vec![v], Op::Select { x: x.0, index }, rg))
    }

    /// Row `row` of a 2-D tensor.
    pub fn row(&mut self, x: Var, row: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || row >= shape[0] {
            return Err(Error::dim("row", format!("row {row} out of range for shape {shape:?}")));
        }
        let k = shape[1];
        let out = self.value(x)[row * k..(row + 1) * k].to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(vec![k], out, Op::Row { x: x.0, row }, rg))
    }

    /// Softmax of a 1-D tensor, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(Error::dim("softmax", format!("expects 1-D input, got {:?}", self.shape(x))));
        }
        let out = softmax_values(self.value(x))?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(shape, out, Op::Softmax { x: x.0 }, rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {shape:?} vs {} labels", labels.len()),
            ));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} outside [0, {k})")));
        }
        let vals = self.value(logits);
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &vals[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            if !mx.is_finite() {
                return Err(Error::Numeric {
                    op: "cross_entropy",
                    detail: format!("non-finite logits in row {i}"),
                });
            }
            let z: f64 = row.iter().map(|&v| ((v - mx) as f64).exp()).sum();
            loss += z.ln() - (row[label] - mx) as f64;
            probs.extend(row.iter().map(|&v| (((v - mx) as f64).exp() / z) as f32));
        }
        let value = (loss / n as f64) as f32;
        let rg = self.rg(logits.0);
        let op = Op::CrossEntropy {
            logits: logits.0,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Vec::new(), vec![value], op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.rg(x.0);
        self.push(Vec::new(), vec![s], Op::Sum { x: x.0 }, rg)
    }

    /// Inner product of a 1-D tensor with a constant vector.
    pub fn dot_const(&mut self, x: Var, c: &[f32]) -> Result<Var> {
        if self.shape(x).len() != 1 || self.shape(x)[0] != c.len() {
            return Err(Error::dim(
                "dot_const",
                format!("shape {:?} vs {} constants", self.shape(x), c.len()),
            ));
        }
        let s = self.value(x).iter().zip(c).map(|(a, b)| a * b).sum::<f32>();
        let rg = self.rg(x.0);
        let op = Op::DotConst {
            x: x.0,
            c: c.to_vec(),
        };
        Ok(self.push(Vec::new(), vec![s], op, rg))
    }

    /// `x·Wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(Error::dim(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?} (input axis 1 must equal weight axis 1)"),
            ));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out: Vec<f32> = (0..n).flat_map(|_| self.value(b).iter().copied()).collect();
        conv::gemm(n, i, o, self.value(x), false, self.value(w), true, &mut out, 1.0);
        let rg = self.rg(x.0) || self.rg(w.0) || self.rg(b.0);
        Ok(self.push(vec![n, o], out, Op::Linear { x: x.0, w: w.0, b: b.0 }, rg))
    }

    /// Spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("global_avg_pool", format!("input must be [N,C,H,W], got {s:?}")));
        }
        let plane = s[2] * s[3];
        let out = self
            .value(x)
            .chunks(plane)
            .map(|p| p.iter().sum::<f32>() / plane as f32)
            .collect();
        let rg = self.rg(x.0);
        Ok(self.push(vec![s[0], s[1]], out, Op::GlobalAvgPool { x: x.0 }, rg))
    }

    /// Concatenates `[N,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat_channels", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 4 {
            return Err(Error::dim("concat_channels", format!("input must be [N,C,H,W], got {s0:?}")));
        }
        let mut c_total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::dim(
                    "concat_channels",
                    format!("{s:?} vs {s0:?}: axes 0, 2, 3 must match"),
                ));
            }
            c_total += s[1];
        }
        let (n, plane) = (s0[0], s0[2] * s0[3]);
        let mut out = Vec::with_capacity(n * c_total * plane);
        for i in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v)[i * c * plane..(i + 1) * c * plane]);
            }
        }
        let rg = xs.iter().any(|v| self.rg(v.0));
        let op = Op::Concat {
            xs: xs.iter().map(|v| v.0).collect(),
        };
        Ok(self.push(vec![n, c_total, s0[2], s0[3]], out, op, rg))
    }

    /// `out[h, w] = x[h + dy, w + dx]`, zero where the source is out of range.
    pub fn shift(&mut self, x: Var, dy: usize, dx: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("shift", format!("input must be [N,C,H,W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(x);
        let mut out = vec![0.0f32; src.len()];
        for (p, dst) in out.chunks_mut(h * w).enumerate() {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..h.saturating_sub(dy) {
                for xx in 0..w.saturating_sub(dx) {
                    dst[y * w + xx] = plane[(y + dy) * w + xx + dx];
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(s, out, Op::Shift { x: x.0, dy, dx }, rg))
    }

    /// Zeros with the shape of `x` and no gradient path back to it.
    pub fn zeros_like(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = numel(&shape);
        self.push(shape, vec![0.0; n], Op::Leaf, false)
    }

    /// Zeros of an explicit shape.
    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = numel(&shape);
        self.push(shape, vec![0.0; n], Op::Leaf, false)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(self.finish(grads));
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(i, &g, &mut grads);
        }
        Ok(self.finish(grads))
    }

    fn finish(&self, mut grads: Vec<Option<Vec<f32>>>) -> Gradients {
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                if g.is_none() {
                    *g = Some(vec![0.0; node.value.len()]);
                }
            } else {
                *g = None;
            }
        }
        Gradients { grads }
    }

    /// Runs [`backward`](Self::backward) and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn adjoint(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let want = |j: usize| nodes[j].requires_grad;
        // Borrow-free accessor: materialises a zeroed buffer on first use.
        fn slot<'a>(grads: &'a mut [Option<Vec<f32>>], nodes: &[Node], j: usize) -> &'a mut Vec<f32> {
            grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()])
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, geom } => {
                if want(*x) {
                    conv::backward_input(geom, g, &nodes[*w].value, slot(grads, nodes, *x));
                }
                if want(*w) {
                    conv::backward_weight(geom, g, &nodes[*x].value, slot(grads, nodes, *w));
                }
            }
            Op::MaxPool { x, argmax } => {
                if want(*x) {
                    let dx = slot(grads, nodes, *x);
                    for (&a, &gv) in argmax.iter().zip(g) {
                        dx[a as usize] += gv;
                    }
                }
            }
            Op::AvgPool { x, geom } => {
                if want(*x) {
                    pool::avg_backward(geom, g, slot(grads, nodes, *x));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = &nodes[*x].shape;
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let m = (n * plane) as f32;
                let mut sum_g = vec![0.0f32; c];
                let mut sum_gx = vec![0.0f32; c];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * plane;
                        for j in o..o + plane {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if want(*x) {
                    let gam = &nodes[*gamma].value;
                    let dx = slot(grads, nodes, *x);
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch] / m;
                            let o = (b * c + ch) * plane;
                            for j in o..o + plane {
                                dx[j] += k * (m * g[j] - sum_g[ch] - xhat[j] * sum_gx[ch]);
                            }
                        }
                    }
                }
                if want(*gamma) {
                    acc(slot(grads, nodes, *gamma), &sum_gx);
                }
                if want(*beta) {
                    acc(slot(grads, nodes, *beta), &sum_g);
                }
            }
            Op::Relu { x } => {
                if want(*x) {
                    let y = &nodes[i].value;
                    let dx = slot(grads, nodes, *x);
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        if yv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if want(v) {
                        acc(slot(grads, nodes, v), g);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if want(v) {
                        let o = &nodes[other].value;
                        let d = slot(grads, nodes, v);
                        for ((d, &gv), &ov) in d.iter_mut().zip(g).zip(o) {
                            *d += gv * ov;
                        }
                    }
                }
            }
            Op::MulScalar { x, c } => {
                if want(*x) {
                    let d = slot(grads, nodes, *x);
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            Op::Scale { x, s } => {
                if want(*x) {
                    let f = nodes[*s].value[0];
                    let d = slot(grads, nodes, *x);
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv * f;
                    }
                }
                if want(*s) {
                    let xv = &nodes[*x].value;
                    let total: f64 = xv.iter().zip(g).map(|(&a, &b)| (a * b) as f64).sum();
                    slot(grads, nodes, *s)[0] += total as f32;
                }
            }
            Op::Select { x, index } => {
                if want(*x) {
                    slot(grads, nodes, *x)[*index] += g[0];
                }
            }
            Op::Row { x, row } => {
                if want(*x) {
                    let k = g.len();
                    acc(&mut slot(grads, nodes, *x)[row * k..(row + 1) * k], g);
                }
            }
            Op::Softmax { x } => {
                if want(*x) {
                    let y = &nodes[i].value;
                    let dot: f32 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    let d = slot(grads, nodes, *x);
                    for ((d, &yv), &gv) in d.iter_mut().zip(y).zip(g) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if want(*logits) {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let f = g[0] / n as f32;
                    let d = slot(grads, nodes, *logits);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            d[r * k + j] += f * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if want(*x) {
                    slot(grads, nodes, *x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::DotConst { x, c } => {
                if want(*x) {
                    let d = slot(grads, nodes, *x);
                    for (d, &cv) in d.iter_mut().zip(c) {
                        *d += g[0] * cv;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                let out = nodes[*w].shape[0];
                if want(*x) {
                    let wv = &nodes[*w].value;
                    conv::gemm(n, out, inp, g, false, wv, false, slot(grads, nodes, *x), 1.0);
                }
                if want(*w) {
                    let xv = &nodes[*x].value;
                    conv::gemm(out, n, inp, g, true, xv, false, slot(grads, nodes, *w), 1.0);
                }
                if want(*b) {
                    let d = slot(grads, nodes, *b);
                    for row in g.chunks(out) {
                        acc(d, row);
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                if want(*x) {
                    let s = &nodes[*x].shape;
                    let plane = s[2] * s[3];
                    let d = slot(grads, nodes, *x);
                    for (chunk, &gv) in d.chunks_mut(plane).zip(g) {
                        let share = gv / plane as f32;
                        chunk.iter_mut().for_each(|v| *v += share);
                    }
                }
            }
            Op::Concat { xs } => {
                let s = &nodes[i].shape;
                let (n, plane, c_total) = (s[0], s[2] * s[3], s[1]);
                let mut offset = 0;
                for &v in xs {
                    let c = nodes[v].shape[1];
                    if want(v) {
                        let d = slot(grads, nodes, v);
                        for b in 0..n {
                            let src = &g[(b * c_total + offset) * plane..][..c * plane];
                            acc(&mut d[b * c * plane..(b + 1) * c * plane], src);
                        }
                    }
                    offset += c;
                }
            }
            Op::Shift { x, dy, dx } => {
                if want(*x) {
                    let s = &nodes[*x].shape;
                    let (h, w) = (s[2], s[3]);
                    let d = slot(grads, nodes, *x);
                    for (p, src) in g.chunks(h * w).enumerate() {
                        let plane = &mut d[p * h * w..(p + 1) * h * w];
                        for y in 0..h.saturating_sub(*dy) {
                            for xx in 0..w.saturating_sub(*dx) {
                                plane[(y + dy) * w + xx + dx] += src[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_values(x: &[f32]) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(Error::dim("softmax", "empty input"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "softmax",
            detail: "non-finite input".into(),
        });
    }
    let mx = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = x.iter().map(|&v| ((v - mx) as f64).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.iter().map(|v| (v / z) as f32).collect())
}
