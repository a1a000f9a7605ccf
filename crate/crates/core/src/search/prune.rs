use crate::error::{Error, Result};
use crate::primitives::PrimitiveKind;
use crate::supernet::{AlphaStore, AlphaTable, EDGES};

fn prune_table(t: &AlphaTable, keep: usize) -> Result<AlphaTable> {
    let mut ops = Vec::with_capacity(EDGES);
    let mut values = Vec::with_capacity(EDGES);
    for e in 0..EDGES {
        let p = t.probs(e);
        let mut order: Vec<usize> = (0..t.k()).collect();
        // Stable: equal weights keep the lower op first.
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
        let mut kept: Vec<usize> = order[..keep].to_vec();
        if kept.iter().all(|&i| t.ops(e)[i] == PrimitiveKind::Zero) {
            // An edge must keep something a genotype can select.
            let best = order
                .iter()
                .copied()
                .find(|&i| t.ops(e)[i] != PrimitiveKind::Zero)
                .expect("tables always hold a non-zero candidate");
            *kept.last_mut().expect("keep >= 1") = best;
        }
        kept.sort_unstable();
        ops.push(kept.iter().map(|&i| t.ops(e)[i]).collect());
        values.push(kept.iter().map(|&i| t.values(e)[i]).collect());
    }
    AlphaTable::new(ops, values)
}

/// Keeps the `keep` strongest candidates per edge (ties to the lower op),
/// carrying their logits over.
pub fn prune_ops(alphas: &AlphaStore, keep: usize) -> Result<AlphaStore> {
    if keep == 0 || keep > alphas.k() {
        return Err(Error::Config(format!(
            "cannot keep {keep} of {} candidates per edge",
            alphas.k()
        )));
    }
    AlphaStore::new(prune_table(&alphas.normal, keep)?, prune_table(&alphas.reduce, keep)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn keep_all_is_identity() {
        let a = AlphaStore::init(&mut seeded(0));
        assert_eq!(prune_ops(&a, 8).unwrap(), a);
        assert!(prune_ops(&a, 9).is_err());
        assert!(prune_ops(&a, 0).is_err());
    }

    #[test]
    fn keep_one_on_dominant_edge() {
        let mut vals = vec![vec![0.0f32; 8]; EDGES];
        for row in &mut vals {
            row[PrimitiveKind::DilConv3x3.index()] = 3.0;
        }
        let t = AlphaTable::full(vals).unwrap();
        let p = prune_ops(&AlphaStore::new(t.clone(), t).unwrap(), 1).unwrap();
        for e in 0..EDGES {
            assert_eq!(p.normal.ops(e), &[PrimitiveKind::DilConv3x3]);
            assert_eq!(p.normal.values(e), &[3.0]);
        }
    }

    #[test]
    fn zero_only_survivor_is_replaced() {
        let mut vals = vec![vec![0.0f32; 8]; EDGES];
        vals[0][0] = 5.0;
        vals[0][3] = 1.0;
        let t = AlphaTable::full(vals).unwrap();
        let p = prune_ops(&AlphaStore::new(t.clone(), t).unwrap(), 1).unwrap();
        assert_eq!(p.normal.ops(0), &[PrimitiveKind::MaxPool3x3]);
    }

    proptest! {
        #[test]
        fn matches_sort_oracle(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let vals: Vec<Vec<f32>> = (0..EDGES).map(|_| (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
            let t = AlphaTable::full(vals.clone()).unwrap();
            let p = prune_ops(&AlphaStore::new(t.clone(), t).unwrap(), 5).unwrap();
            for (e, row) in vals.iter().enumerate() {
                // Oracle: sort (−logit, index) pairs; logits order like their softmax.
                let mut pairs: Vec<(f32, usize)> = row.iter().enumerate().map(|(i, &v)| (-v, i)).collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut want: Vec<usize> = pairs[..5].iter().map(|x| x.1).collect();
                want.sort();
                let got: Vec<usize> = p.normal.ops(e).iter().map(|k| k.index()).collect();
                prop_assert_eq!(got, want);
            }
        }
    }
}
