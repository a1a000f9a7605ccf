use super::{CellLayout, Genotype, NetLayout, Preprocess, INPUT_CHANNELS, STEPS};
use crate::engine::{ParamGroup, ParamStore, Tape, Var};
use crate::error::Result;
use crate::primitives::{build_primitive, head_params, primitive_param_count, stem_params, Block, Head, Primitive, PrimitiveKind};
use crate::rng::Rng;

/// Spatial size used when only channel geometry matters.
const COUNT_HW: usize = 32;

#[derive(Debug, Clone)]
struct EvalCell {
    pre0: Preprocess,
    pre1: Preprocess,
    ops: Vec<(usize, Primitive)>,
}

impl EvalCell {
    fn new(layout: &CellLayout, cell: &[(usize, PrimitiveKind)], store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let pre0 = Preprocess::input0(layout, store, rng)?;
        let pre1 = Preprocess::input1(layout, store, rng);
        let ops = cell
            .iter()
            .map(|&(src, kind)| Ok((src, build_primitive(&layout.spec(src, kind), store, rng)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalCell { pre0, pre1, ops })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, s0: Var, s1: Var) -> Result<Var> {
        let mut states = vec![self.pre0.forward(tape, store, s0)?, self.pre1.forward(tape, store, s1)?];
        for step in 0..STEPS {
            let (a_src, a_op) = &self.ops[2 * step];
            let (b_src, b_op) = &self.ops[2 * step + 1];
            let a = a_op.forward(tape, store, states[*a_src])?;
            let b = b_op.forward(tape, store, states[*b_src])?;
            let s = tape.add(a, b)?;
            states.push(s);
        }
        tape.concat_channels(&states[2..])
    }
}

/// The discrete network a genotype describes, trained from scratch.
#[derive(Debug)]
pub struct EvalNet {
    layout: NetLayout,
    store: ParamStore,
    stem: Block,
    cells: Vec<EvalCell>,
    head: Head,
}

impl EvalNet {
    pub fn new(g: &Genotype, num_classes: usize, input_h: usize, input_w: usize, rng: &mut Rng) -> Result<Self> {
        let layout = NetLayout::new(g.depth, g.init_channels, num_classes, input_h, input_w)?;
        let mut store = ParamStore::new();
        let stem = Block::stem(&mut store, rng, INPUT_CHANNELS, layout.stem_channels);
        let cells = layout
            .cells
            .iter()
            .map(|cl| EvalCell::new(cl, g.cell(cl.kind), &mut store, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Head::new(&mut store, rng, layout.final_channels(), num_classes);
        Ok(EvalNet {
            layout,
            store,
            stem,
            cells,
            head,
        })
    }

    pub fn layout(&self) -> &NetLayout {
        &self.layout
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Tally of every instantiated weight.
    pub fn param_count(&self) -> u64 {
        self.store
            .ids_in(ParamGroup::Network)
            .map(|id| self.store.get(id).numel() as u64)
            .sum()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let stem = self.stem.forward(tape, &self.store, x)?;
        let (mut s0, mut s1) = (stem, stem);
        for cell in &self.cells {
            let out = cell.forward(tape, &self.store, s0, s1)?;
            (s0, s1) = (s1, out);
        }
        self.head.forward(tape, &self.store, s1)
    }
}

/// Closed-form parameter count of the evaluation network for `g` at the
/// given depth and width: stem, per-cell preprocessing and chosen ops, head.
pub fn genotype_param_count(g: &Genotype, eval_depth: usize, init_channels: usize, num_classes: usize) -> Result<u64> {
    let layout = NetLayout::new(eval_depth, init_channels, num_classes, COUNT_HW, COUNT_HW)?;
    let mut total = stem_params(INPUT_CHANNELS, layout.stem_channels);
    for cl in &layout.cells {
        total += cl.preprocess_params();
        let cell = g.cell(cl.kind);
        total += cell
            .iter()
            .map(|&(src, kind)| primitive_param_count(&cl.spec(src, kind)))
            .sum::<u64>();
    }
    total += head_params(layout.final_channels(), num_classes);
    Ok(total)
}
