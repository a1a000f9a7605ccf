use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::cost::{softmax_f64, MacCost, ParamCost, ResourceCost};
use crate::engine::{rel_err, ParamStore, Tape, Tensor};
use crate::primitives::{head_params, primitive_param_count, relu_conv_bn_params, stem_params};
use crate::rng::seeded;

/// Cost read from a per-kind table, for hand-checkable sums.
#[derive(Debug)]
struct KindCost([f64; 8]);

impl ResourceCost for KindCost {
    fn name(&self) -> &str {
        "kind"
    }
    fn cost(&self, spec: &PrimitiveSpec) -> Result<f64> {
        Ok(self.0[spec.kind.index()])
    }
}

fn random_input(tape: &mut Tape, shape: [usize; 4], seed: u64) -> Var {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    tape.constant(shape.to_vec(), data).unwrap()
}

fn probs_leaf(tape: &mut Tape, logits: &[f32]) -> Var {
    let a = tape.leaf(Tensor::new(vec![logits.len()], logits.to_vec()).unwrap());
    tape.softmax(a).unwrap()
}

#[test]
fn edge_ordering() {
    let order: Vec<(usize, usize)> = (0..EDGES).map(edge_endpoints).collect();
    assert_eq!(&order[..5], &[(0, 0), (1, 0), (0, 1), (1, 1), (2, 1)]);
    let mut e = 0;
    for step in 0..STEPS {
        for src in 0..step + 2 {
            assert_eq!(edge_index(step, src), e);
            e += 1;
        }
    }
    assert_eq!(e, EDGES);
    assert_eq!((2..6).sum::<usize>(), 14);
}

#[test]
fn layout_follows_reduction_convention() {
    let l = NetLayout::new(8, 16, 10, 32, 32).unwrap();
    let kinds: Vec<CellKind> = l.cells.iter().map(|c| c.kind).collect();
    assert_eq!(kinds[2], CellKind::Reduce);
    assert_eq!(kinds[5], CellKind::Reduce);
    assert_eq!(kinds.iter().filter(|k| **k == CellKind::Reduce).count(), 2);
    assert_eq!(l.cells[0].c, 16);
    assert_eq!(l.cells[2].c, 32);
    assert_eq!(l.cells[7].c, 64);
    assert_eq!(l.cells[0].c_prev_prev, 48);
    assert!(l.cells[3].reduction_prev);
    assert_eq!((l.cells[7].h, l.cells[7].w), (8, 8));
    assert_eq!(l.final_channels(), 256);
    assert!(NetLayout::new(3, 4, 10, 6, 8).is_err());
    assert!(NetLayout::new(1, 4, 10, 8, 8).is_err());
}

#[test]
fn alpha_counts() {
    let a = AlphaStore::init(&mut seeded(1));
    assert_eq!(a.normal.num_params(), 112);
    assert_eq!(a.reduce.num_params(), 112);
    assert_eq!(a.num_params(), 224);
    let v = a.normal.flat_values();
    assert!(v.iter().all(|x| x.abs() < 1e-2));
    assert!(v.iter().any(|&x| x != v[0]));
}

fn mixed(specs: Vec<PrimitiveSpec>, models: &[Arc<dyn ResourceCost>]) -> (MixedOp, ParamStore) {
    let mut store = ParamStore::new();
    let op = MixedOp::new(specs, models, &mut store, &mut seeded(3)).unwrap();
    (op, store)
}

#[test]
fn mixed_identity_zero_halves_input() {
    let specs = vec![
        PrimitiveSpec::new(PrimitiveKind::Zero, 2, 1, 4, 4),
        PrimitiveSpec::new(PrimitiveKind::SkipConnect, 2, 1, 4, 4),
    ];
    let mut costs = [0.0; 8];
    costs[PrimitiveKind::Zero.index()] = 100.0;
    costs[PrimitiveKind::SkipConnect.index()] = 300.0;
    let model: Arc<dyn ResourceCost> = Arc::new(KindCost(costs));
    let (op, store) = mixed(specs, &[model]);
    let mut tape = Tape::new();
    let x = random_input(&mut tape, [2, 2, 4, 4], 0);
    let p = probs_leaf(&mut tape, &[0.0, 0.0]);
    let (y, c) = op.forward(&mut tape, &store, x, p).unwrap();
    for (a, b) in tape.value(y).iter().zip(tape.value(x)) {
        assert_eq!(*a, 0.5 * b);
    }
    assert_eq!(tape.item(c[0]).unwrap(), 200.0);
}

fn all_specs(c: usize, stride: usize, hw: usize) -> Vec<PrimitiveSpec> {
    PrimitiveKind::ALL
        .iter()
        .map(|&k| PrimitiveSpec::new(k, c, stride, hw, hw))
        .collect()
}

#[test]
fn mixed_matches_enumeration() {
    let mut rng = seeded(9);
    for (trial, stride) in [(0u64, 1usize), (1, 2), (2, 1)] {
        let models: Vec<Arc<dyn ResourceCost>> = vec![Arc::new(ParamCost), Arc::new(MacCost)];
        let (op, store) = mixed(all_specs(4, stride, 8), &models);
        let logits: Vec<f32> = (0..8).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let mut tape = Tape::new();
        let x = random_input(&mut tape, [2, 4, 8, 8], trial);
        let p = probs_leaf(&mut tape, &logits);
        let (y, c) = op.forward(&mut tape, &store, x, p).unwrap();

        // Oracle: evaluate every candidate on its own and weight in f64.
        let pw = softmax_f64(&logits.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let mut want = vec![0.0f64; tape.value(y).len()];
        for (i, prim) in op.ops().iter().enumerate() {
            let mut t = Tape::new();
            let xi = t.constant(tape.shape(x).to_vec(), tape.value(x).to_vec()).unwrap();
            let yi = prim.forward(&mut t, &store, xi).unwrap();
            for (w, v) in want.iter_mut().zip(t.value(yi)) {
                *w += pw[i] * *v as f64;
            }
        }
        let got: Vec<f64> = tape.value(y).iter().map(|&v| v as f64).collect();
        assert!(rel_err(&got, &want, 1e-12) < 1e-6, "{}", rel_err(&got, &want, 1e-12));

        for (m, model) in models.iter().enumerate() {
            let costs: Vec<f64> = op.specs().iter().map(|s| model.cost(s).unwrap()).collect();
            let want: f64 = (0..8).map(|i| pw[i] * costs[i]).sum();
            let got = tape.item(c[m]).unwrap() as f64;
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }
    }
}

#[test]
fn mixed_alpha_gradient_matches_fd() {
    let (op, store) = mixed(all_specs(2, 1, 4), &[]);
    let mut rng = seeded(21);
    let logits: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let weights: Vec<f32> = (0..2 * 2 * 16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let loss_at = |a: &[f32]| -> (f32, Vec<f32>) {
        let mut tape = Tape::new();
        let x = random_input(&mut tape, [2, 2, 4, 4], 5);
        let av = tape.leaf(Tensor::new(vec![8], a.to_vec()).unwrap().with_requires_grad(true));
        let p = tape.softmax(av).unwrap();
        let (y, _) = op.forward(&mut tape, &store, x, p).unwrap();
        let r = tape.constant(vec![2, 2, 4, 4], weights.clone()).unwrap();
        let prod = tape.mul(y, r).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        (tape.item(loss).unwrap(), g.get(av).unwrap().to_vec())
    };
    let (_, analytic) = loss_at(&logits);
    let h = 1e-2f32;
    let fd: Vec<f64> = (0..8)
        .map(|i| {
            let mut up = logits.clone();
            up[i] += h;
            let mut dn = logits.clone();
            dn[i] -= h;
            (loss_at(&up).0 as f64 - loss_at(&dn).0 as f64) / (2.0 * h as f64)
        })
        .collect();
    let analytic: Vec<f64> = analytic.iter().map(|&v| v as f64).collect();
    let err = rel_err(&analytic, &fd, 1e-3);
    assert!(err < 1e-3, "rel err {err}");
}

fn layout_cell(kind: CellKind, c: usize) -> CellLayout {
    CellLayout {
        kind,
        reduction_prev: false,
        c_prev_prev: 3 * c,
        c_prev: 3 * c,
        c,
        h: 8,
        w: 8,
    }
}

#[test]
fn cell_with_all_weight_on_zero_outputs_zeros() {
    let mut vals = vec![vec![-1e9f32; 8]; EDGES];
    for row in &mut vals {
        row[PrimitiveKind::Zero.index()] = 0.0;
    }
    let table = AlphaTable::full(vals).unwrap();
    let layout = layout_cell(CellKind::Normal, 4);
    let mut store = ParamStore::new();
    let cell = SearchCell::new(layout, &table, &[], &mut store, &mut seeded(0)).unwrap();
    let mut tape = Tape::new();
    let s0 = random_input(&mut tape, [2, 12, 8, 8], 1);
    let s1 = random_input(&mut tape, [2, 12, 8, 8], 2);
    let a = tape.constant(vec![EDGES, 8], table.flat_values()).unwrap();
    let probs: Vec<Var> = (0..EDGES)
        .map(|e| {
            let r = tape.row(a, e).unwrap();
            tape.softmax(r).unwrap()
        })
        .collect();
    let (out, _) = cell.forward(&mut tape, &store, s0, s1, &probs).unwrap();
    assert_eq!(tape.shape(out), &[2, 16, 8, 8]);
    assert!(tape.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn cell_cost_is_sum_of_edge_costs() {
    let table = AlphaStore::init(&mut seeded(4)).reduce;
    let mut rng = seeded(8);
    let mut vals = vec![];
    for _ in 0..EDGES {
        vals.push((0..8).map(|_| rng.random_range(-2.0f32..2.0)).collect());
    }
    let table = AlphaTable::new((0..EDGES).map(|e| table.ops(e).to_vec()).collect(), vals).unwrap();
    let layout = layout_cell(CellKind::Reduce, 4);
    let models: Vec<Arc<dyn ResourceCost>> = vec![Arc::new(ParamCost)];
    let mut store = ParamStore::new();
    let cell = SearchCell::new(layout, &table, &models, &mut store, &mut seeded(0)).unwrap();
    let mut tape = Tape::new();
    let s0 = random_input(&mut tape, [2, 12, 8, 8], 1);
    let s1 = random_input(&mut tape, [2, 12, 8, 8], 2);
    let a = tape.constant(vec![EDGES, 8], table.flat_values()).unwrap();
    let probs: Vec<Var> = (0..EDGES)
        .map(|e| {
            let r = tape.row(a, e).unwrap();
            tape.softmax(r).unwrap()
        })
        .collect();
    let (out, c) = cell.forward(&mut tape, &store, s0, s1, &probs).unwrap();
    assert_eq!(tape.shape(out), &[2, 16, 4, 4]);

    // Per-edge oracle with specs written out by hand.
    let mut want = 0.0;
    for step in 0..STEPS {
        for src in 0..step + 2 {
            let e = edge_index(step, src);
            let (stride, hw) = if src < 2 { (2, 8) } else { (1, 4) };
            let p = table.probs(e);
            for (i, k) in PrimitiveKind::ALL.iter().enumerate() {
                want += p[i] * primitive_param_count(&PrimitiveSpec::new(*k, 4, stride, hw, hw)) as f64;
            }
        }
    }
    let got = tape.item(c[0]).unwrap() as f64;
    assert!((got - want).abs() / want < 1e-6, "{got} vs {want}");
}

fn supernet(depth: usize, c: usize, alphas: &AlphaStore, models: &[Arc<dyn ResourceCost>]) -> SuperNet {
    let cfg = SuperNetConfig {
        depth,
        init_channels: c,
        num_classes: 10,
        input_h: 8,
        input_w: 8,
    };
    SuperNet::new(cfg, alphas, models, &mut seeded(17)).unwrap()
}

#[test]
fn network_cost_is_data_and_batch_independent() {
    let alphas = AlphaStore::init(&mut seeded(2));
    let models: Vec<Arc<dyn ResourceCost>> = vec![Arc::new(ParamCost), Arc::new(MacCost)];
    let net = supernet(3, 4, &alphas, &models);
    let mut seen = Vec::new();
    for (n, seed) in [(2, 0), (3, 1), (2, 7)] {
        let mut tape = Tape::new();
        let x = random_input(&mut tape, [n, 3, 8, 8], seed);
        let out = net.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(out.logits), &[n, 10]);
        seen.push(out.costs.iter().map(|&c| tape.item(c).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(seen[0], seen[1]);
    assert_eq!(seen[0], seen[2]);
    let exact = net.expected_costs().unwrap();
    for (got, want) in seen[0].iter().zip(&exact) {
        assert!((*got as f64 - want).abs() / want < 1e-5);
    }
}

#[test]
fn uniform_alpha_cost_is_mean_over_candidates() {
    let zeros = AlphaTable::full(vec![vec![0.0; 8]; EDGES]).unwrap();
    let alphas = AlphaStore::new(zeros.clone(), zeros).unwrap();
    let net = supernet(3, 8, &alphas, &[Arc::new(ParamCost)]);
    // depth 3: normal at 8x8 with C=8, reduce at C=16 and C=32.
    let mut want = 0.0;
    for (reduce, c, hw) in [(false, 8, 8), (true, 16, 8), (true, 32, 4)] {
        for step in 0..STEPS {
            for src in 0..step + 2 {
                let stride = if reduce && src < 2 { 2 } else { 1 };
                let h = if reduce && src >= 2 { hw / 2 } else { hw };
                for k in PrimitiveKind::ALL {
                    want += primitive_param_count(&PrimitiveSpec::new(k, c, stride, h, h)) as f64 / 8.0;
                }
            }
        }
    }
    let got = net.expected_costs().unwrap()[0];
    assert!((got - want).abs() < 1e-6 * want, "{got} vs {want}");
}

#[test]
fn supernet_round_trips_alpha() {
    let alphas = AlphaStore::init(&mut seeded(5));
    let net = supernet(2, 4, &alphas, &[]);
    assert_eq!(net.alphas().unwrap(), alphas);
    assert_eq!(net.cells().len(), 2);
    assert!(net.cells().iter().all(|c| c.edges().len() == EDGES));
}

fn genotype_cell(pairs: [(usize, PrimitiveKind); 8]) -> Vec<(usize, PrimitiveKind)> {
    pairs.to_vec()
}

#[test]
fn derive_dominant_and_uniform() {
    let mut vals = vec![vec![0.0f32; 8]; EDGES];
    for step in 0..STEPS {
        for src in 0..2 {
            vals[edge_index(step, src)][PrimitiveKind::SepConv3x3.index()] = 5.0;
        }
    }
    let t = AlphaTable::full(vals).unwrap();
    let g = derive_genotype(&AlphaStore::new(t.clone(), t).unwrap(), 16, 8);
    for cell in [&g.normal, &g.reduce] {
        for (j, &(src, k)) in cell.iter().enumerate() {
            assert_eq!(src, j % 2);
            assert_eq!(k, PrimitiveKind::SepConv3x3);
        }
    }

    let u = AlphaTable::full(vec![vec![0.0; 8]; EDGES]).unwrap();
    let store = AlphaStore::new(u.clone(), u).unwrap();
    let a = derive_genotype(&store, 16, 8);
    let b = derive_genotype(&store, 16, 8);
    assert_eq!(a, b);
    for &(src, k) in &a.normal {
        assert!(src < 2);
        assert_eq!(k, PrimitiveKind::SkipConnect);
    }
}

/// Exhaustive formulation: an item is chosen iff fewer than `keep` rivals beat it.
fn beaten_by(scores: &[f64], i: usize) -> usize {
    (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

fn oracle_cell(t: &AlphaTable) -> Vec<(usize, PrimitiveKind)> {
    let mut out = vec![];
    for step in 0..STEPS {
        let mut best = vec![];
        for src in 0..step + 2 {
            let e = edge_index(step, src);
            let p = t.probs(e);
            let masked: Vec<f64> = t
                .ops(e)
                .iter()
                .zip(&p)
                .map(|(k, &w)| if *k == PrimitiveKind::Zero { f64::NEG_INFINITY } else { w })
                .collect();
            let op = (0..masked.len()).find(|&i| beaten_by(&masked, i) == 0).unwrap();
            best.push((masked[op], t.ops(e)[op]));
        }
        let scores: Vec<f64> = best.iter().map(|b| b.0).collect();
        for src in 0..step + 2 {
            if beaten_by(&scores, src) < 2 {
                out.push((src, best[src].1));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn derive_matches_exhaustive_oracle(seed in any::<u64>(), coarse in any::<bool>()) {
        let mut rng = seeded(seed);
        let mut table = || {
            let vals = (0..EDGES)
                .map(|_| (0..8).map(|_| {
                    let v: f32 = rng.random_range(-2.0..2.0);
                    if coarse { v.round() } else { v }
                }).collect())
                .collect();
            AlphaTable::full(vals).unwrap()
        };
        let store = AlphaStore::new(table(), table()).unwrap();
        let g = derive_genotype(&store, 8, 5);
        prop_assert_eq!(&g.normal, &oracle_cell(&store.normal));
        prop_assert_eq!(&g.reduce, &oracle_cell(&store.reduce));
        prop_assert!(Genotype::new(g.normal.clone(), g.reduce.clone(), 8, 5).is_ok());
    }

    #[test]
    fn genotype_count_matches_tally(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let mut cell = || {
            let mut v = vec![];
            for step in 0..STEPS {
                let a = rng.random_range(0..step + 2);
                let mut b = rng.random_range(0..step + 1);
                if b >= a { b += 1; }
                for src in [a.min(b), a.max(b)] {
                    v.push((src, PrimitiveKind::ALL[rng.random_range(1..8)]));
                }
            }
            v
        };
        let g = Genotype::new(cell(), cell(), 8, 5).unwrap();
        let net = EvalNet::new(&g, 10, 8, 8, &mut seeded(0)).unwrap();
        prop_assert_eq!(genotype_param_count(&g, 5, 8, 10).unwrap(), net.param_count());
    }
}

#[test]
fn validity_rule() {
    use PrimitiveKind::*;
    let base = genotype_cell([
        (0, SepConv3x3),
        (1, SepConv3x3),
        (0, SepConv3x3),
        (1, SepConv3x3),
        (0, DilConv3x3),
        (2, SepConv5x5),
        (1, MaxPool3x3),
        (3, AvgPool3x3),
    ]);
    let g = Genotype::new(base.clone(), base.clone(), 16, 8).unwrap();
    assert!(is_valid(&g));

    let mut three = base.clone();
    for j in [0, 2, 4] {
        three[j].1 = SkipConnect;
    }
    let g = Genotype::new(three, base.clone(), 16, 8).unwrap();
    assert!(!is_valid(&g));
    assert_eq!(g.validity().rule(), Some(SKIP_RULE));
    assert_eq!(
        g.validity().to_string(),
        "invalid: 3 skip-connects in normal cell (more than two skip-connections in the normal cell)"
    );

    let mut two = base.clone();
    two[0].1 = SkipConnect;
    two[3].1 = SkipConnect;
    let mut five = base;
    for j in 0..5 {
        five[j].1 = SkipConnect;
    }
    let g = Genotype::new(two, five, 16, 8).unwrap();
    assert!(is_valid(&g));
}

#[test]
fn genotype_structure_checked() {
    use PrimitiveKind::*;
    let ok = vec![(0, MaxPool3x3); 8]
        .into_iter()
        .enumerate()
        .map(|(j, (_, k))| (j % 2, k))
        .collect::<Vec<_>>();
    assert!(Genotype::new(ok.clone(), ok.clone(), 8, 5).is_ok());
    let mut bad = ok.clone();
    bad[0].1 = Zero;
    assert!(Genotype::new(bad, ok.clone(), 8, 5).is_err());
    let mut bad = ok.clone();
    bad[1].0 = 2;
    assert!(Genotype::new(bad, ok.clone(), 8, 5).is_err());
    let mut bad = ok.clone();
    bad[7].0 = 0;
    bad[6].0 = 0;
    assert!(Genotype::new(bad, ok.clone(), 8, 5).is_err());
    assert!(Genotype::new(ok[..6].to_vec(), ok, 8, 5).is_err());
}

#[test]
fn genotype_json_schema() {
    use PrimitiveKind::*;
    let cell: Vec<_> = [SepConv3x3, SkipConnect, DilConv5x5, MaxPool3x3, AvgPool3x3, SepConv5x5, DilConv3x3, SepConv3x3]
        .iter()
        .enumerate()
        .map(|(j, &k)| (j % 2, k))
        .collect();
    let g = Genotype::new(cell.clone(), cell, 36, 20).unwrap();
    let text = g.to_json().unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["normal"][1], serde_json::json!([1, "skip_connect"]));
    assert_eq!(v["reduce"].as_array().unwrap().len(), 8);
    assert_eq!(v["init_channels"], 36);
    assert_eq!(v["depth"], 20);
    assert_eq!(Genotype::from_json(&text).unwrap(), g);
    let broken = text.replace("skip_connect", "skip");
    assert!(matches!(Genotype::from_json(&broken), Err(Error::Validation(_))));
}

#[test]
fn all_pool_genotype_counts_only_fixed_parts() {
    let cell: Vec<_> = (0..8).map(|j| (j % 2, PrimitiveKind::AvgPool3x3)).collect();
    let g = Genotype::new(cell.clone(), cell, 16, 8).unwrap();
    let layout = NetLayout::new(8, 16, 10, 32, 32).unwrap();
    let mut fixed = stem_params(3, 48) + head_params(layout.final_channels(), 10);
    for cl in &layout.cells {
        // Reduce cells' pools carry no weights either, only the preprocessors do.
        fixed += cl.preprocess_params();
    }
    assert_eq!(genotype_param_count(&g, 8, 16, 10).unwrap(), fixed);
    let net = EvalNet::new(&g, 10, 8, 8, &mut seeded(0)).unwrap();
    assert_eq!(net.param_count(), fixed);
    assert_eq!(relu_conv_bn_params(48, 16), 48 * 16 + 32);
}

#[test]
fn desk_genotype_count_and_monotonicity() {
    let g = derive_genotype(&AlphaStore::init(&mut seeded(11)), 16, 8);
    let net = EvalNet::new(&g, 10, 8, 8, &mut seeded(1)).unwrap();
    let count = genotype_param_count(&g, 8, 16, 10).unwrap();
    assert_eq!(count, net.param_count());
    assert!(genotype_param_count(&g, 8, 32, 10).unwrap() > count);
    let mut tape = Tape::new();
    let x = random_input(&mut tape, [2, 3, 8, 8], 3);
    let y = net.forward(&mut tape, x).unwrap();
    assert_eq!(tape.shape(y), &[2, 10]);
}

#[test]
fn alpha_snapshot_json() {
    let a = AlphaStore::init(&mut seeded(6));
    let text = a.to_json().unwrap();
    assert_eq!(AlphaStore::from_json(&text).unwrap(), a);
    assert_eq!(a.digest().len(), 16);
    assert!(AlphaStore::from_json("{\"schema_version\": 1}").is_err());
    let bad = text.replacen("sep_conv_3x3", "conv_9x9", 1);
    assert!(AlphaStore::from_json(&bad).is_err());
}
