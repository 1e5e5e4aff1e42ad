use std::collections::BTreeMap;

use proptest::prelude::*;

use weaverec::datagen::{
    five_core_filter, freeze_candidates, leave_one_out_split, mix_domains, Catalog, DomainDataset, HeldOut, ItemId,
    MixMode, UserSequence,
};
use weaverec::evaluator::{mrr_at_k, ndcg_at_k};
use weaverec::merger::{weight_average, LAMBDA_SUM_TOL};
use weaverec::numkernel::softmax;
use weaverec::seqmodel::forward;
use weaverec::{checkpoint, Adaptation, BaseModel, DomainId, LoraAdapter, LoraConfig, RngStream};

fn dataset(seqs: &[Vec<ItemId>], catalog_size: ItemId) -> DomainDataset {
    DomainDataset {
        domain: DomainId::new("d"),
        users: seqs
            .iter()
            .enumerate()
            .map(|(u, s)| UserSequence::from_items(format!("u{u:03}"), s))
            .collect(),
        catalog: Catalog(
            (0..catalog_size)
                .map(|i| (i, format!("item {i}")))
                .collect::<BTreeMap<_, _>>(),
        ),
    }
}

/// Five-core view, or `None` when nothing survives.
fn core(seqs: &[Vec<ItemId>], catalog_size: ItemId) -> Option<DomainDataset> {
    match five_core_filter(&dataset(seqs, catalog_size)) {
        Ok(d) => Some(d),
        Err(weaverec::Error::EmptyDataset { .. }) => None,
        Err(e) => panic!("{e}"),
    }
}

fn sequences() -> impl Strategy<Value = Vec<Vec<ItemId>>> {
    proptest::collection::vec(proptest::collection::vec(0..25u32 as ItemId, 0..14), 1..40)
}

fn adapter(base: &BaseModel, seed: u64) -> LoraAdapter {
    let cfg = LoraConfig {
        rank: 2,
        ..LoraConfig::default()
    };
    let mut a = LoraAdapter::init(base, &cfg, &mut RngStream::new(seed)).unwrap();
    let mut rng = RngStream::new(seed.wrapping_add(7));
    let flat: Vec<f64> = a.to_flat().iter().map(|_| rng.normal(0.0, 0.3)).collect();
    a.set_flat(&flat).unwrap();
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn five_core_filter_is_idempotent(seqs in sequences()) {
        let Some(once) = core(&seqs, 25) else { return Ok(()) };
        prop_assert_eq!(five_core_filter(&once).unwrap(), once.clone());
        prop_assert!(once.users.iter().all(|u| u.len() >= 5));
    }

    #[test]
    fn leave_one_out_keeps_every_interaction(seqs in sequences()) {
        let Some(filtered) = core(&seqs, 25) else { return Ok(()) };
        let split = leave_one_out_split(&filtered).unwrap();
        for (s, u) in split.users.iter().zip(&filtered.users) {
            prop_assert_eq!(s.train.len() + 2, u.len());
            prop_assert_eq!(s.full_sequence(), u.items());
        }
    }

    #[test]
    fn candidates_avoid_interacted_items(seqs in sequences(), seed in any::<u64>()) {
        let Some(filtered) = core(&seqs, 60) else { return Ok(()) };
        let split = leave_one_out_split(&filtered).unwrap();
        for which in [HeldOut::Validation, HeldOut::Test] {
            let pool = match freeze_candidates(&split, which, 9, seed) {
                Ok(p) => p,
                Err(weaverec::Error::InsufficientCandidates { user, available, .. }) => {
                    // Only legitimate when that user really has too few unseen items.
                    let u = split.user(&user).unwrap();
                    prop_assert_eq!(available, split.catalog.len() - u.interacted().len());
                    prop_assert!(available < 9);
                    continue;
                }
                Err(e) => panic!("{e}"),
            };
            for u in &split.users {
                let c = pool.get(&u.user_id).unwrap();
                let seen = u.interacted();
                prop_assert!(c.negatives.iter().all(|n| !seen.contains(n)));
                prop_assert_eq!(c.order.len(), 10);
            }
        }
    }

    #[test]
    fn unit_ratio_mix_contains_each_target_example_once(
        t in sequences(),
        s in sequences(),
        seed in any::<u64>(),
    ) {
        let (Some(target), Some(source)) = (core(&t, 25), core(&s, 25)) else { return Ok(()) };
        let (ts, ss) = (leave_one_out_split(&target).unwrap(), leave_one_out_split(&source).unwrap());
        let mut ss = ss;
        ss.domain = DomainId::new("s");
        let mixed = mix_domains(&ts, &ss, MixMode::Ratio(1.0), &mut RngStream::new(seed)).unwrap();
        let from_target: Vec<_> = mixed.examples.iter().filter(|e| e.domain == ts.domain).cloned().collect();
        let mut expected = ts.train_examples();
        let mut got = from_target;
        let key = |e: &weaverec::Example| (e.user_id.clone(), e.prefix.len());
        expected.sort_by_key(key);
        got.sort_by_key(key);
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn metrics_never_drop_when_rank_improves(pos in 0usize..30, k in 1usize..=10) {
        let ranking: Vec<ItemId> = (0..30).collect();
        let worse = ranking[pos];
        let better = ranking[pos.saturating_sub(1)];
        prop_assert!(ndcg_at_k(&ranking, better, k).unwrap() >= ndcg_at_k(&ranking, worse, k).unwrap());
        prop_assert!(mrr_at_k(&ranking, better, k).unwrap() >= mrr_at_k(&ranking, worse, k).unwrap());
        let rank = pos + 1;
        let zero = rank > k;
        prop_assert_eq!(ndcg_at_k(&ranking, worse, k).unwrap() == 0.0, zero);
        prop_assert_eq!(mrr_at_k(&ranking, worse, k).unwrap() == 0.0, zero);
        prop_assert_eq!(ndcg_at_k(&ranking, worse, 1).unwrap(), if rank == 1 { 1.0 } else { 0.0 });
    }

    #[test]
    fn dense_path_matches_factored_path(
        seed in any::<u64>(),
        prefix in proptest::collection::vec(0..9u32 as ItemId, 1..8),
    ) {
        let base = BaseModel::init(9, 6, 5, &mut RngStream::new(seed));
        let a = adapter(&base, seed);
        let factored = forward(&base, Adaptation::Lora(&a), &prefix).unwrap();
        let dense = forward(&base, Adaptation::Dense(&a.to_dense()), &prefix).unwrap();
        for (x, y) in factored.iter().zip(&dense) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        let p = softmax(&factored);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn weight_average_is_elementwise(seed in any::<u64>(), l in 0.0f64..=1.0) {
        let base = BaseModel::init(7, 4, 4, &mut RngStream::new(seed));
        let (x, y) = (adapter(&base, seed), adapter(&base, seed ^ 1));
        let merged = weight_average(&[&x, &y], &[l, 1.0 - l]).unwrap();
        let (fx, fy, fm) = (x.to_flat(), y.to_flat(), merged.to_flat());
        for i in 0..fm.len() {
            prop_assert_eq!(fm[i], l * fx[i] + (1.0 - l) * fy[i]);
        }
    }

    #[test]
    fn sequential_averaging_matches_flat(seed in any::<u64>()) {
        let base = BaseModel::init(7, 4, 4, &mut RngStream::new(seed));
        let (a, b, c) = (adapter(&base, seed), adapter(&base, seed ^ 1), adapter(&base, seed ^ 2));
        let third = 1.0 / 3.0;
        let flat = weight_average(&[&a, &b, &c], &[third, third, third]).unwrap().to_flat();
        let ab = weight_average(&[&a, &b], &[0.5, 0.5]).unwrap();
        let seq = weight_average(&[&ab, &c], &[2.0 / 3.0, third]).unwrap().to_flat();
        for (p, q) in flat.iter().zip(&seq) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn simplex_is_enforced(l in proptest::collection::vec(0.0f64..1.0, 2..5)) {
        let base = BaseModel::init(5, 3, 3, &mut RngStream::new(0));
        let adapters: Vec<LoraAdapter> = (0..l.len() as u64).map(|s| adapter(&base, s)).collect();
        let refs: Vec<&LoraAdapter> = adapters.iter().collect();
        let off = (l.iter().sum::<f64>() - 1.0).abs() >= LAMBDA_SUM_TOL;
        prop_assert_eq!(weight_average(&refs, &l).is_err(), off);
    }

    #[test]
    fn checkpoints_roundtrip(seed in any::<u64>()) {
        let base = BaseModel::init(6, 4, 3, &mut RngStream::new(seed));
        let a = adapter(&base, seed);
        let bytes = checkpoint::encode(&a);
        let back: LoraAdapter = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &a);
        prop_assert_eq!(checkpoint::encode(&back), bytes);
    }
}
