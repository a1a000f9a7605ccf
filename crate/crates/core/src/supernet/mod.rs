//! Cell topology, the searchable supernet, genotype derivation and the
//! discrete network a genotype describes.
//!
//! A cell has two inputs (nodes 0 and 1) and four steps (nodes 2..6). Step `i`
//! receives one edge from every earlier node, so edges are numbered
//! step-major, source-ascending: (0→2), (1→2), (0→3), (1→3), (2→3), …

mod alpha;
mod eval;
mod genotype;
mod network;

pub use alpha::{AlphaStore, AlphaTable};
pub use eval::{genotype_param_count, EvalNet};
pub use genotype::{derive_genotype, is_valid, Genotype, Validity, GENOTYPE_SCHEMA_VERSION, SKIP_LIMIT, SKIP_RULE};
pub use network::{reachable_specs, MixedOp, NetOutput, SearchCell, SuperNet, SuperNetConfig};

use serde::{Deserialize, Serialize};

use crate::engine::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::primitives::{
    factorized_reduce_params, relu_conv_bn_params, Block, FactorizedReduce, PrimitiveKind, PrimitiveSpec,
};
use crate::rng::Rng;

pub const STEPS: usize = 4;
pub const EDGES: usize = 14;
pub const STEM_MULTIPLIER: usize = 3;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Normal,
    Reduce,
}

/// Index of the edge from node `source` into step `step`.
pub fn edge_index(step: usize, source: usize) -> usize {
    debug_assert!(step < STEPS && source < step + 2);
    step * (step + 3) / 2 + source
}

/// `(source, step)` of edge `e`.
pub fn edge_endpoints(e: usize) -> (usize, usize) {
    assert!(e < EDGES, "edge {e} out of range");
    let mut step = 0;
    while edge_index(step, 0) + step + 2 <= e {
        step += 1;
    }
    (e - edge_index(step, 0), step)
}

/// Channel and spatial context of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellLayout {
    pub kind: CellKind,
    pub reduction_prev: bool,
    pub c_prev_prev: usize,
    pub c_prev: usize,
    /// Per-step channel count; the cell emits `4·c`.
    pub c: usize,
    /// Spatial size of the preprocessed inputs.
    pub h: usize,
    pub w: usize,
}

impl CellLayout {
    pub fn out_channels(&self) -> usize {
        STEPS * self.c
    }

    pub fn out_hw(&self) -> (usize, usize) {
        match self.kind {
            CellKind::Normal => (self.h, self.w),
            CellKind::Reduce => (self.h.div_ceil(2), self.w.div_ceil(2)),
        }
    }

    pub fn edge_stride(&self, source: usize) -> usize {
        if self.kind == CellKind::Reduce && source < 2 {
            2
        } else {
            1
        }
    }

    /// Spec of candidate `kind` on an edge leaving `source`.
    pub fn spec(&self, source: usize, kind: PrimitiveKind) -> PrimitiveSpec {
        let (h, w) = if source < 2 { (self.h, self.w) } else { self.out_hw() };
        PrimitiveSpec::new(kind, self.c, self.edge_stride(source), h, w)
    }

    pub fn preprocess_params(&self) -> u64 {
        let p0 = if self.reduction_prev {
            factorized_reduce_params(self.c_prev_prev, self.c)
        } else {
            relu_conv_bn_params(self.c_prev_prev, self.c)
        };
        p0 + relu_conv_bn_params(self.c_prev, self.c)
    }
}

/// Positions of the two reduce cells in a network of `depth` cells.
pub fn reduce_positions(depth: usize) -> [usize; 2] {
    [depth / 3, 2 * depth / 3]
}

/// Cell-by-cell geometry of a stem + `depth` cells + head network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetLayout {
    pub stem_channels: usize,
    pub cells: Vec<CellLayout>,
    pub num_classes: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl NetLayout {
    pub fn new(depth: usize, init_channels: usize, num_classes: usize, input_h: usize, input_w: usize) -> Result<Self> {
        if depth < 2 {
            return Err(Error::Config(format!("network depth must be at least 2, got {depth}")));
        }
        if init_channels == 0 || num_classes == 0 {
            return Err(Error::Config("channels and classes must be positive".into()));
        }
        if input_h == 0 || input_w == 0 || input_h % 4 != 0 || input_w % 4 != 0 {
            return Err(Error::Config(format!(
                "input {input_h}x{input_w} must be divisible by 4 for two stride-2 reductions"
            )));
        }
        let reduce = reduce_positions(depth);
        let stem_channels = STEM_MULTIPLIER * init_channels;
        let (mut c_pp, mut c_p, mut c) = (stem_channels, stem_channels, init_channels);
        let (mut h, mut w) = (input_h, input_w);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(depth);
        for i in 0..depth {
            let kind = if reduce.contains(&i) {
                c *= 2;
                CellKind::Reduce
            } else {
                CellKind::Normal
            };
            let cell = CellLayout {
                kind,
                reduction_prev,
                c_prev_prev: c_pp,
                c_prev: c_p,
                c,
                h,
                w,
            };
            (h, w) = cell.out_hw();
            c_pp = c_p;
            c_p = cell.out_channels();
            reduction_prev = kind == CellKind::Reduce;
            cells.push(cell);
        }
        Ok(NetLayout {
            stem_channels,
            cells,
            num_classes,
            input_h,
            input_w,
        })
    }

    pub fn depth(&self) -> usize {
        self.cells.len()
    }

    pub fn final_channels(&self) -> usize {
        self.cells.last().map_or(self.stem_channels, |c| c.out_channels())
    }
}

/// Aligns a cell input to the cell's channel count (and, after a reduce
/// cell, to its spatial size).
#[derive(Debug, Clone)]
pub enum Preprocess {
    Conv(Block),
    Reduce(FactorizedReduce),
}

impl Preprocess {
    fn input0(layout: &CellLayout, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        Ok(if layout.reduction_prev {
            Preprocess::Reduce(FactorizedReduce::new(store, rng, layout.c_prev_prev, layout.c)?)
        } else {
            Preprocess::Conv(Block::relu_conv_bn(store, rng, layout.c_prev_prev, layout.c, 1, 1, 0))
        })
    }

    fn input1(layout: &CellLayout, store: &mut ParamStore, rng: &mut Rng) -> Self {
        Preprocess::Conv(Block::relu_conv_bn(store, rng, layout.c_prev, layout.c, 1, 1, 0))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Preprocess::Conv(b) => b.forward(tape, store, x),
            Preprocess::Reduce(fr) => fr.forward(tape, store, x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Preprocess::Conv(b) => b.param_ids(),
            Preprocess::Reduce(fr) => fr.param_ids(),
        }
    }
}

#[cfg(test)]
mod tests;
