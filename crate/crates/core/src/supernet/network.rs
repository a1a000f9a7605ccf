use std::sync::Arc;

use super::{edge_endpoints, edge_index, AlphaStore, AlphaTable, CellKind, CellLayout, NetLayout, Preprocess, EDGES, INPUT_CHANNELS, STEPS};
use crate::cost::{softmax_f64, ResourceCost};
use crate::engine::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::primitives::{build_primitive, Block, Head, Primitive, PrimitiveKind, PrimitiveSpec};
use crate::rng::Rng;

/// One edge of the supernet: every surviving candidate, weighted by the
/// softmax of its α row.
#[derive(Debug, Clone)]
pub struct MixedOp {
    specs: Vec<PrimitiveSpec>,
    ops: Vec<Primitive>,
    /// `costs[m][i]`: cost of candidate `i` under model `m`.
    costs: Vec<Vec<f64>>,
    costs_f32: Vec<Vec<f32>>,
}

impl MixedOp {
    pub fn new(
        specs: Vec<PrimitiveSpec>,
        models: &[Arc<dyn ResourceCost>],
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let ops = specs
            .iter()
            .map(|s| build_primitive(s, store, rng))
            .collect::<Result<Vec<_>>>()?;
        let costs = models
            .iter()
            .map(|m| specs.iter().map(|s| m.cost(s)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let costs_f32 = costs
            .iter()
            .map(|row| row.iter().map(|&c| c as f32).collect())
            .collect();
        Ok(MixedOp {
            specs,
            ops,
            costs,
            costs_f32,
        })
    }

    pub fn specs(&self) -> &[PrimitiveSpec] {
        &self.specs
    }

    pub fn ops(&self) -> &[Primitive] {
        &self.ops
    }

    /// Cost of each candidate under model `m`.
    pub fn costs(&self, m: usize) -> &[f64] {
        &self.costs[m]
    }

    /// `Σ p_i·o_i(x)` and, per cost model, `Σ p_i·cost(o_i)`.
    ///
    /// Zero candidates contribute nothing to the sum and are not evaluated.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, p: Var) -> Result<(Var, Vec<Var>)> {
        if tape.shape(p) != [self.ops.len()] {
            return Err(Error::dim(
                "mixed_op",
                format!("weights {:?} for {} candidates", tape.shape(p), self.ops.len()),
            ));
        }
        let mut acc: Option<Var> = None;
        for (i, (op, spec)) in self.ops.iter().zip(&self.specs).enumerate() {
            if spec.kind == PrimitiveKind::Zero {
                continue;
            }
            let y = op.forward(tape, store, x)?;
            let w = tape.select(p, i)?;
            let term = tape.scale(y, w)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        let out = match acc {
            Some(v) => v,
            None => self.ops[0].forward(tape, store, x)?,
        };
        let costs = self
            .costs_f32
            .iter()
            .map(|c| tape.dot_const(p, c))
            .collect::<Result<Vec<_>>>()?;
        Ok((out, costs))
    }
}

fn add_costs(tape: &mut Tape, acc: &mut Vec<Var>, new: Vec<Var>) -> Result<()> {
    if acc.is_empty() {
        *acc = new;
    } else {
        for (a, n) in acc.iter_mut().zip(new) {
            *a = tape.add(*a, n)?;
        }
    }
    Ok(())
}

/// A cell of 14 mixed edges over four steps.
#[derive(Debug, Clone)]
pub struct SearchCell {
    layout: CellLayout,
    pre0: Preprocess,
    pre1: Preprocess,
    edges: Vec<MixedOp>,
}

impl SearchCell {
    pub fn new(
        layout: CellLayout,
        table: &AlphaTable,
        models: &[Arc<dyn ResourceCost>],
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let pre0 = Preprocess::input0(&layout, store, rng)?;
        let pre1 = Preprocess::input1(&layout, store, rng);
        let edges = (0..EDGES)
            .map(|e| {
                let (src, _) = edge_endpoints(e);
                let specs = table.ops(e).iter().map(|&k| layout.spec(src, k)).collect();
                MixedOp::new(specs, models, store, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SearchCell {
            layout,
            pre0,
            pre1,
            edges,
        })
    }

    pub fn layout(&self) -> &CellLayout {
        &self.layout
    }

    pub fn kind(&self) -> CellKind {
        self.layout.kind
    }

    pub fn edges(&self) -> &[MixedOp] {
        &self.edges
    }

    /// Concatenated step outputs and the summed expected cost of all 14 edges.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s0: Var,
        s1: Var,
        probs: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        let mut states = vec![self.pre0.forward(tape, store, s0)?, self.pre1.forward(tape, store, s1)?];
        let mut costs = Vec::new();
        for step in 0..STEPS {
            let mut sum: Option<Var> = None;
            for (src, &state) in states.iter().enumerate() {
                let e = edge_index(step, src);
                let (y, c) = self.edges[e].forward(tape, store, state, probs[e])?;
                add_costs(tape, &mut costs, c)?;
                sum = Some(match sum {
                    None => y,
                    Some(s) => tape.add(s, y)?,
                });
            }
            states.push(sum.expect("every step has incoming edges"));
        }
        let out = tape.concat_channels(&states[2..])?;
        Ok((out, costs))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.pre0.param_ids();
        ids.extend(self.pre1.param_ids());
        for e in &self.edges {
            for op in e.ops() {
                ids.extend(op.param_ids());
            }
        }
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuperNetConfig {
    pub depth: usize,
    pub init_channels: usize,
    pub num_classes: usize,
    pub input_h: usize,
    pub input_w: usize,
}

/// Logits plus one accumulated expected cost per registered model.
#[derive(Debug, Clone)]
pub struct NetOutput {
    pub logits: Var,
    pub costs: Vec<Var>,
}

/// Stem, a chain of search cells sharing α per cell type, and a classifier.
///
/// θ and α both live in the owned [`ParamStore`], in separate groups.
#[derive(Debug)]
pub struct SuperNet {
    config: SuperNetConfig,
    layout: NetLayout,
    store: ParamStore,
    stem: Block,
    cells: Vec<SearchCell>,
    head: Head,
    alpha_normal: ParamId,
    alpha_reduce: ParamId,
    template: AlphaStore,
    model_names: Vec<String>,
}

impl SuperNet {
    pub fn new(
        config: SuperNetConfig,
        alphas: &AlphaStore,
        models: &[Arc<dyn ResourceCost>],
        rng: &mut Rng,
    ) -> Result<Self> {
        let layout = NetLayout::new(
            config.depth,
            config.init_channels,
            config.num_classes,
            config.input_h,
            config.input_w,
        )?;
        let mut store = ParamStore::new();
        let stem = Block::stem(&mut store, rng, INPUT_CHANNELS, layout.stem_channels);
        let cells = layout
            .cells
            .iter()
            .map(|cl| SearchCell::new(*cl, alphas.table(cl.kind), models, &mut store, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Head::new(&mut store, rng, layout.final_channels(), config.num_classes);
        let k = alphas.k();
        let mut add_alpha = |t: &AlphaTable| {
            store.add(
                Tensor::new(vec![EDGES, k], t.flat_values()).expect("alpha table shape"),
                ParamGroup::Architecture,
            )
        };
        let alpha_normal = add_alpha(&alphas.normal);
        let alpha_reduce = add_alpha(&alphas.reduce);
        Ok(SuperNet {
            config,
            layout,
            store,
            stem,
            cells,
            head,
            alpha_normal,
            alpha_reduce,
            template: alphas.clone(),
            model_names: models.iter().map(|m| m.name().to_string()).collect(),
        })
    }

    pub fn config(&self) -> &SuperNetConfig {
        &self.config
    }

    pub fn layout(&self) -> &NetLayout {
        &self.layout
    }

    pub fn cells(&self) -> &[SearchCell] {
        &self.cells
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn model_names(&self) -> &[String] {
        &self.model_names
    }

    pub fn alpha_param(&self, kind: CellKind) -> ParamId {
        match kind {
            CellKind::Normal => self.alpha_normal,
            CellKind::Reduce => self.alpha_reduce,
        }
    }

    /// Current α, read back from the store.
    pub fn alphas(&self) -> Result<AlphaStore> {
        let normal = self
            .template
            .normal
            .with_flat_values(self.store.get(self.alpha_normal).data())?;
        let reduce = self
            .template
            .reduce
            .with_flat_values(self.store.get(self.alpha_reduce).data())?;
        AlphaStore::new(normal, reduce)
    }

    /// Number of θ entries owned by cells, stem and head.
    pub fn network_param_count(&self) -> usize {
        self.store
            .ids_in(ParamGroup::Network)
            .map(|id| self.store.get(id).numel())
            .sum()
    }

    fn row_probs(&self, tape: &mut Tape, id: ParamId) -> Result<Vec<Var>> {
        let a = tape.param(&self.store, id);
        (0..EDGES)
            .map(|e| {
                let r = tape.row(a, e)?;
                tape.softmax(r)
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<NetOutput> {
        let pn = self.row_probs(tape, self.alpha_normal)?;
        let pr = self.row_probs(tape, self.alpha_reduce)?;
        let stem = self.stem.forward(tape, &self.store, x)?;
        let (mut s0, mut s1) = (stem, stem);
        let mut costs = Vec::new();
        for cell in &self.cells {
            let probs = match cell.kind() {
                CellKind::Normal => &pn,
                CellKind::Reduce => &pr,
            };
            let (out, c) = cell.forward(tape, &self.store, s0, s1, probs)?;
            add_costs(tape, &mut costs, c)?;
            (s0, s1) = (s1, out);
        }
        let logits = self.head.forward(tape, &self.store, s1)?;
        Ok(NetOutput { logits, costs })
    }

    /// `C_m` for every registered model, in f64, from the current α.
    pub fn expected_costs(&self) -> Result<Vec<f64>> {
        let alphas = self.alphas()?;
        let mut totals = vec![0.0; self.model_names.len()];
        for cell in &self.cells {
            let table = alphas.table(cell.kind());
            for (e, edge) in cell.edges().iter().enumerate() {
                let p = softmax_f64(&table.values(e).iter().map(|&v| v as f64).collect::<Vec<_>>());
                for (m, t) in totals.iter_mut().enumerate() {
                    *t += crate::cost::expected_cost(&p, edge.costs(m));
                }
            }
        }
        Ok(totals)
    }

    /// Every distinct primitive spec the network instantiates.
    pub fn specs(&self) -> Vec<PrimitiveSpec> {
        let mut v: Vec<PrimitiveSpec> = self
            .cells
            .iter()
            .flat_map(|c| c.edges().iter().flat_map(|e| e.specs().iter().copied()))
            .collect();
        v.sort();
        v.dedup();
        v
    }

    #[doc(hidden)]
    pub fn cell_param_ids(&self, cell: usize) -> Vec<ParamId> {
        self.cells[cell].param_ids()
    }
}

/// Every spec reachable by a supernet of this size with all eight candidates.
pub fn reachable_specs(layout: &NetLayout) -> Vec<PrimitiveSpec> {
    let mut v: Vec<PrimitiveSpec> = layout
        .cells
        .iter()
        .flat_map(|cl| {
            (0..EDGES).flat_map(move |e| {
                let (src, _) = edge_endpoints(e);
                PrimitiveKind::ALL.into_iter().map(move |k| cl.spec(src, k))
            })
        })
        .collect();
    v.sort();
    v.dedup();
    v
}
