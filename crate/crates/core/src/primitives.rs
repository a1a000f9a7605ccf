//! Candidate operations for a mixed edge, plus the fixed blocks (stem,
//! channel-aligning preprocessors, classifier head) that surround them.
//!
//! Every structure here has a closed-form parameter and MAC count. The counts
//! are tallied against built instances in tests, so the formulas and the
//! builders cannot drift apart.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::engine::{ConvConfig, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrimitiveKind {
    Zero,
    SkipConnect,
    AvgPool3x3,
    MaxPool3x3,
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 8] = [
        PrimitiveKind::Zero,
        PrimitiveKind::SkipConnect,
        PrimitiveKind::AvgPool3x3,
        PrimitiveKind::MaxPool3x3,
        PrimitiveKind::SepConv3x3,
        PrimitiveKind::SepConv5x5,
        PrimitiveKind::DilConv3x3,
        PrimitiveKind::DilConv5x5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Zero => "zero",
            PrimitiveKind::SkipConnect => "skip_connect",
            PrimitiveKind::AvgPool3x3 => "avg_pool_3x3",
            PrimitiveKind::MaxPool3x3 => "max_pool_3x3",
            PrimitiveKind::SepConv3x3 => "sep_conv_3x3",
            PrimitiveKind::SepConv5x5 => "sep_conv_5x5",
            PrimitiveKind::DilConv3x3 => "dil_conv_3x3",
            PrimitiveKind::DilConv5x5 => "dil_conv_5x5",
        }
    }

    /// Zero, skip-connect and the two pools own no weights (at stride 1).
    pub fn is_parameter_free(self) -> bool {
        matches!(
            self,
            PrimitiveKind::Zero
                | PrimitiveKind::SkipConnect
                | PrimitiveKind::AvgPool3x3
                | PrimitiveKind::MaxPool3x3
        )
    }

    fn kernel(self) -> usize {
        match self {
            PrimitiveKind::SepConv5x5 | PrimitiveKind::DilConv5x5 => 5,
            _ => 3,
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PrimitiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown primitive operation {s:?}")))
    }
}

/// A primitive placed on a concrete edge: its kind plus the feature-map
/// context that determines its resource costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PrimitiveSpec {
    pub kind: PrimitiveKind,
    pub channels: usize,
    pub stride: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl PrimitiveSpec {
    pub fn new(kind: PrimitiveKind, channels: usize, stride: usize, input_h: usize, input_w: usize) -> Self {
        PrimitiveSpec {
            kind,
            channels,
            stride,
            input_h,
            input_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::Config(format!(
                "{}: unsupported stride {} (must be 1 or 2)",
                self.kind, self.stride
            )));
        }
        if self.channels == 0 || self.input_h == 0 || self.input_w == 0 {
            return Err(Error::Config(format!("{}: empty feature map", self.kind)));
        }
        if self.kind == PrimitiveKind::SkipConnect && self.stride == 2 && self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "factorized reduce needs an even channel count, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn output_hw(&self) -> (usize, usize) {
        (self.input_h.div_ceil(self.stride), self.input_w.div_ceil(self.stride))
    }
}

impl fmt::Display for PrimitiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.kind, self.channels, self.input_h, self.input_w, self.stride
        )
    }
}

// ---------------------------------------------------------------------------
// Building blocks

#[derive(Debug, Clone)]
pub enum Layer {
    Relu,
    Conv { weight: ParamId, cfg: ConvConfig },
    BatchNorm { gamma: ParamId, beta: ParamId },
}

/// A straight chain of layers.
#[derive(Debug, Clone, Default)]
pub struct Block {
    layers: Vec<Layer>,
}

fn conv_weight(store: &mut ParamStore, rng: &mut Rng, c_out: usize, c_in_g: usize, k: usize) -> ParamId {
    let fan_in = (c_in_g * k * k) as f32;
    let std = (2.0 / fan_in).sqrt();
    let n = c_out * c_in_g * k * k;
    let data = (0..n).map(|_| std * rng.sample::<f32, _>(StandardNormal)).collect();
    let t = Tensor::new(vec![c_out, c_in_g, k, k], data).expect("conv weight shape");
    store.add(t, ParamGroup::Network)
}

fn bn_params(store: &mut ParamStore, c: usize) -> (ParamId, ParamId) {
    let gamma = store.add(Tensor::full(vec![c], 1.0), ParamGroup::Network);
    let beta = store.add(Tensor::zeros(vec![c]), ParamGroup::Network);
    (gamma, beta)
}

impl Block {
    fn push_conv(
        &mut self,
        store: &mut ParamStore,
        rng: &mut Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        cfg: ConvConfig,
    ) {
        let weight = conv_weight(store, rng, c_out, c_in / cfg.groups, k);
        self.layers.push(Layer::Conv { weight, cfg });
    }

    fn push_bn(&mut self, store: &mut ParamStore, c: usize) {
        let (gamma, beta) = bn_params(store, c);
        self.layers.push(Layer::BatchNorm { gamma, beta });
    }

    /// ReLU → conv(k, stride, padding) → BN.
    pub fn relu_conv_bn(
        store: &mut ParamStore,
        rng: &mut Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let mut b = Block::default();
        b.layers.push(Layer::Relu);
        b.push_conv(store, rng, c_in, c_out, k, ConvConfig::new(stride, padding, 1, 1));
        b.push_bn(store, c_out);
        b
    }

    /// conv 3×3 → BN, no activation.
    pub fn stem(store: &mut ParamStore, rng: &mut Rng, c_in: usize, c_out: usize) -> Self {
        let mut b = Block::default();
        b.push_conv(store, rng, c_in, c_out, 3, ConvConfig::new(1, 1, 1, 1));
        b.push_bn(store, c_out);
        b
    }

    /// ReLU → depthwise k×k → pointwise 1×1 → BN.
    fn push_depthwise_pair(
        &mut self,
        store: &mut ParamStore,
        rng: &mut Rng,
        c: usize,
        k: usize,
        stride: usize,
        dilation: usize,
    ) {
        let padding = dilation * (k - 1) / 2;
        self.layers.push(Layer::Relu);
        self.push_conv(store, rng, c, c, k, ConvConfig::new(stride, padding, dilation, c));
        self.push_conv(store, rng, c, c, 1, ConvConfig::default());
        self.push_bn(store, c);
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = match layer {
                Layer::Relu => tape.relu(x),
                Layer::Conv { weight, cfg } => {
                    let w = tape.param(store, *weight);
                    tape.conv2d(x, w, *cfg)?
                }
                Layer::BatchNorm { gamma, beta } => {
                    let g = tape.param(store, *gamma);
                    let b = tape.param(store, *beta);
                    tape.batch_norm(x, g, b, BN_EPS)?
                }
            };
        }
        Ok(x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Relu => vec![],
                Layer::Conv { weight, .. } => vec![*weight],
                Layer::BatchNorm { gamma, beta } => vec![*gamma, *beta],
            })
            .collect()
    }
}

/// Stride-2 channel mapper: two 1×1 stride-2 convs, the second on the input
/// shifted by one pixel, concatenated and batch-normalized.
#[derive(Debug, Clone)]
pub struct FactorizedReduce {
    conv_a: ParamId,
    conv_b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

impl FactorizedReduce {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, c_in: usize, c_out: usize) -> Result<Self> {
        if c_out % 2 != 0 {
            return Err(Error::Config(format!(
                "factorized reduce needs an even output channel count, got {c_out}"
            )));
        }
        let conv_a = conv_weight(store, rng, c_out / 2, c_in, 1);
        let conv_b = conv_weight(store, rng, c_out / 2, c_in, 1);
        let (gamma, beta) = bn_params(store, c_out);
        Ok(FactorizedReduce {
            conv_a,
            conv_b,
            gamma,
            beta,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let cfg = ConvConfig::new(2, 0, 1, 1);
        let r = tape.relu(x);
        let wa = tape.param(store, self.conv_a);
        let a = tape.conv2d(r, wa, cfg)?;
        let shifted = tape.shift(r, 1, 1)?;
        let wb = tape.param(store, self.conv_b);
        let b = tape.conv2d(shifted, wb, cfg)?;
        let cat = tape.concat_channels(&[a, b])?;
        let g = tape.param(store, self.gamma);
        let be = tape.param(store, self.beta);
        tape.batch_norm(cat, g, be, BN_EPS)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.conv_a, self.conv_b, self.gamma, self.beta]
    }
}

/// A built candidate operation owning its weights in a [`ParamStore`].
#[derive(Debug, Clone)]
pub enum Primitive {
    Zero { stride: usize },
    Identity,
    FactorizedReduce(FactorizedReduce),
    MaxPool { stride: usize },
    AvgPool { stride: usize },
    Conv(Block),
}

pub fn build_primitive(spec: &PrimitiveSpec, store: &mut ParamStore, rng: &mut Rng) -> Result<Primitive> {
    spec.validate()?;
    let (c, s) = (spec.channels, spec.stride);
    Ok(match spec.kind {
        PrimitiveKind::Zero => Primitive::Zero { stride: s },
        PrimitiveKind::SkipConnect if s == 1 => Primitive::Identity,
        PrimitiveKind::SkipConnect => Primitive::FactorizedReduce(FactorizedReduce::new(store, rng, c, c)?),
        PrimitiveKind::AvgPool3x3 => Primitive::AvgPool { stride: s },
        PrimitiveKind::MaxPool3x3 => Primitive::MaxPool { stride: s },
        PrimitiveKind::SepConv3x3 | PrimitiveKind::SepConv5x5 => {
            let k = spec.kind.kernel();
            let mut b = Block::default();
            b.push_depthwise_pair(store, rng, c, k, s, 1);
            b.push_depthwise_pair(store, rng, c, k, 1, 1);
            Primitive::Conv(b)
        }
        PrimitiveKind::DilConv3x3 | PrimitiveKind::DilConv5x5 => {
            let mut b = Block::default();
            b.push_depthwise_pair(store, rng, c, spec.kind.kernel(), s, 2);
            Primitive::Conv(b)
        }
    })
}

impl Primitive {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Primitive::Zero { stride } => {
                let s = tape.shape(x).to_vec();
                if s.len() != 4 {
                    return Err(Error::dim("zero", format!("input must be [N,C,H,W], got {s:?}")));
                }
                Ok(tape.zeros(vec![s[0], s[1], s[2].div_ceil(*stride), s[3].div_ceil(*stride)]))
            }
            Primitive::Identity => Ok(x),
            Primitive::FactorizedReduce(fr) => fr.forward(tape, store, x),
            Primitive::MaxPool { stride } => tape.max_pool2d(x, 3, *stride, 1),
            Primitive::AvgPool { stride } => tape.avg_pool2d(x, 3, *stride, 1),
            Primitive::Conv(b) => b.forward(tape, store, x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Primitive::FactorizedReduce(fr) => fr.param_ids(),
            Primitive::Conv(b) => b.param_ids(),
            _ => Vec::new(),
        }
    }

    /// Number of scalar weights this instance owns in `store`.
    pub fn owned_params(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).numel()).sum()
    }
}

// ---------------------------------------------------------------------------
// Closed-form costs

/// Exact parameter count of `build_primitive(spec)`.
pub fn primitive_param_count(spec: &PrimitiveSpec) -> u64 {
    let c = spec.channels as u64;
    let k = spec.kind.kernel() as u64;
    match spec.kind {
        PrimitiveKind::Zero | PrimitiveKind::AvgPool3x3 | PrimitiveKind::MaxPool3x3 => 0,
        PrimitiveKind::SkipConnect if spec.stride == 1 => 0,
        PrimitiveKind::SkipConnect => c * c + 2 * c,
        PrimitiveKind::SepConv3x3 | PrimitiveKind::SepConv5x5 => 2 * (c * k * k + c * c + 2 * c),
        PrimitiveKind::DilConv3x3 | PrimitiveKind::DilConv5x5 => c * k * k + c * c + 2 * c,
    }
}

/// Multiply-accumulates of every convolution inside the primitive, per image.
pub fn primitive_mac_count(spec: &PrimitiveSpec) -> u64 {
    let c = spec.channels as u64;
    let k = spec.kind.kernel() as u64;
    let (oh, ow) = spec.output_hw();
    let out_px = (oh * ow) as u64;
    let depthwise = c * k * k * out_px;
    let pointwise = c * c * out_px;
    match spec.kind {
        PrimitiveKind::Zero | PrimitiveKind::AvgPool3x3 | PrimitiveKind::MaxPool3x3 => 0,
        PrimitiveKind::SkipConnect if spec.stride == 1 => 0,
        // Two C → C/2 pointwise convs at the reduced resolution.
        PrimitiveKind::SkipConnect => 2 * c * (c / 2) * out_px,
        PrimitiveKind::SepConv3x3 | PrimitiveKind::SepConv5x5 => 2 * (depthwise + pointwise),
        PrimitiveKind::DilConv3x3 | PrimitiveKind::DilConv5x5 => depthwise + pointwise,
    }
}

/// Parameters of a ReLU-conv(1×1)-BN preprocessor.
pub fn relu_conv_bn_params(c_in: usize, c_out: usize) -> u64 {
    (c_in * c_out + 2 * c_out) as u64
}

/// Parameters of a factorized reduce from `c_in` to `c_out` channels.
pub fn factorized_reduce_params(c_in: usize, c_out: usize) -> u64 {
    (2 * c_in * (c_out / 2) + 2 * c_out) as u64
}

pub fn stem_params(c_in: usize, c_out: usize) -> u64 {
    (c_in * c_out * 9 + 2 * c_out) as u64
}

pub fn head_params(features: usize, classes: usize) -> u64 {
    (features * classes + classes) as u64
}

/// Global average pool followed by a linear classifier.
#[derive(Debug, Clone)]
pub struct Head {
    weight: ParamId,
    bias: ParamId,
}

impl Head {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, features: usize, classes: usize) -> Self {
        let bound = 1.0 / (features as f32).sqrt();
        let w = (0..features * classes)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b = (0..classes).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = store.add(
            Tensor::new(vec![classes, features], w).expect("head weight"),
            ParamGroup::Network,
        );
        let bias = store.add(Tensor::new(vec![classes], b).expect("head bias"), ParamGroup::Network);
        Head { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(x)?;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(pooled, w, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn built(spec: PrimitiveSpec) -> (Primitive, ParamStore) {
        let mut store = ParamStore::new();
        let p = build_primitive(&spec, &mut store, &mut seeded(0)).unwrap();
        (p, store)
    }

    #[test]
    fn eight_kinds_four_parameter_free() {
        assert_eq!(PrimitiveKind::ALL.len(), 8);
        let free: Vec<_> = PrimitiveKind::ALL
            .iter()
            .filter(|k| k.is_parameter_free())
            .collect();
        assert_eq!(free.len(), 4);
        for k in PrimitiveKind::ALL {
            assert_eq!(k.name().parse::<PrimitiveKind>().unwrap(), k);
        }
        assert!("conv_7x7".parse::<PrimitiveKind>().is_err());
    }

    #[test]
    fn zero_and_skip_forward() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![1, 2, 2, 2], (0..8).map(|v| v as f32 - 3.0).collect())
            .unwrap();
        let (zero, store) = built(PrimitiveSpec::new(PrimitiveKind::Zero, 2, 1, 2, 2));
        let y = zero.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 2]);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
        let (skip, store) = built(PrimitiveSpec::new(PrimitiveKind::SkipConnect, 2, 1, 2, 2));
        let y = skip.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn zero_blocks_gradient_skip_passes_it() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .with_requires_grad(true);
        for (kind, want) in [(PrimitiveKind::Zero, 0.0), (PrimitiveKind::SkipConnect, 1.0)] {
            let (p, store) = built(PrimitiveSpec::new(kind, 1, 1, 2, 2));
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = p.forward(&mut tape, &store, xv).unwrap();
            let loss = tape.sum(y);
            let g = tape.backward(loss).unwrap();
            assert!(g.get(xv).unwrap().iter().all(|&v| v == want));
        }
    }

    #[test]
    fn worked_param_counts() {
        let sep3 = PrimitiveSpec::new(PrimitiveKind::SepConv3x3, 16, 1, 8, 8);
        assert_eq!(primitive_param_count(&sep3), 864);
        let (p, store) = built(sep3);
        assert_eq!(p.owned_params(&store), 864);

        let dil5 = PrimitiveSpec::new(PrimitiveKind::DilConv5x5, 16, 1, 8, 8);
        assert_eq!(primitive_param_count(&dil5), 688);
        let (p, store) = built(dil5);
        assert_eq!(p.owned_params(&store), 688);

        let fr = PrimitiveSpec::new(PrimitiveKind::SkipConnect, 16, 2, 8, 8);
        assert_eq!(primitive_param_count(&fr), 288);
        let (p, store) = built(fr);
        assert_eq!(p.owned_params(&store), 288);

        for k in [PrimitiveKind::Zero, PrimitiveKind::AvgPool3x3, PrimitiveKind::MaxPool3x3] {
            for c in [1, 8, 36] {
                assert_eq!(primitive_param_count(&PrimitiveSpec::new(k, c, 1, 4, 4)), 0);
            }
        }
    }

    #[test]
    fn param_formula_matches_every_instantiation() {
        for kind in PrimitiveKind::ALL {
            for c in [8, 16, 36] {
                for s in [1, 2] {
                    let spec = PrimitiveSpec::new(kind, c, s, 8, 8);
                    let (p, store) = built(spec);
                    assert_eq!(
                        p.owned_params(&store) as u64,
                        primitive_param_count(&spec),
                        "{spec:?}"
                    );
                }
            }
        }
    }

    /// Per-layer oracle: MACs of one conv = C_out · (C_in/groups) · kH · kW · H' · W'.
    fn layer_macs(c_out: u64, c_in_g: u64, k: u64, oh: u64, ow: u64) -> u64 {
        c_out * c_in_g * k * k * oh * ow
    }

    #[test]
    fn mac_counts() {
        assert_eq!(
            primitive_mac_count(&PrimitiveSpec::new(PrimitiveKind::Zero, 8, 1, 8, 8)),
            0
        );
        // pointwise C=8 at 4×4: 8·8·16
        assert_eq!(layer_macs(8, 8, 1, 4, 4), 1024);
        let spec = PrimitiveSpec::new(PrimitiveKind::SepConv3x3, 8, 1, 8, 8);
        let want = 2 * (layer_macs(8, 1, 3, 8, 8) + layer_macs(8, 8, 1, 8, 8));
        assert_eq!(primitive_mac_count(&spec), want);
        let spec = PrimitiveSpec::new(PrimitiveKind::SepConv5x5, 8, 2, 8, 8);
        let want = layer_macs(8, 1, 5, 4, 4)
            + layer_macs(8, 8, 1, 4, 4)
            + layer_macs(8, 1, 5, 4, 4)
            + layer_macs(8, 8, 1, 4, 4);
        assert_eq!(primitive_mac_count(&spec), want);
        let spec = PrimitiveSpec::new(PrimitiveKind::SkipConnect, 8, 2, 8, 8);
        assert_eq!(primitive_mac_count(&spec), 2 * layer_macs(4, 8, 1, 4, 4));
    }

    #[test]
    fn all_primitives_conform() {
        for kind in PrimitiveKind::ALL {
            for s in [1, 2] {
                let spec = PrimitiveSpec::new(kind, 4, s, 8, 8);
                let (p, store) = built(spec);
                let mut tape = Tape::new();
                let x = tape.constant(vec![2, 4, 8, 8], vec![0.5; 512]).unwrap();
                let y = p.forward(&mut tape, &store, x).unwrap();
                assert_eq!(tape.shape(y), &[2, 4, 8 / s, 8 / s], "{kind} stride {s}");
            }
        }
    }

    #[test]
    fn bad_specs_rejected() {
        let mut store = ParamStore::new();
        let spec = PrimitiveSpec::new(PrimitiveKind::SepConv3x3, 8, 3, 8, 8);
        assert!(matches!(
            build_primitive(&spec, &mut store, &mut seeded(0)),
            Err(Error::Config(_))
        ));
        let spec = PrimitiveSpec::new(PrimitiveKind::SkipConnect, 7, 2, 8, 8);
        assert!(build_primitive(&spec, &mut store, &mut seeded(0)).is_err());
    }
}
