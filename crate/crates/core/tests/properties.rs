use fedcspack_core::model::{Activation, FlatParams, ShapeSpec};
use fedcspack_core::packing::{
    build_mask, ceil_share, cosine, kl_package, package_views, score_packages, select_topk,
};
use fedcspack_core::partition::{partition, synth_blobs, PartitionLaw, PartitionSpec};
use fedcspack_core::wire::{decode_update, encode_update, PackedUpdate, UpdateEntry};
use proptest::prelude::*;

fn shape_strategy() -> impl Strategy<Value = ShapeSpec> {
    (prop::collection::vec(1usize..6, 2..5), any::<bool>()).prop_map(|(dims, relu)| {
        let layers = dims.windows(2).map(|w| (w[0], w[1])).collect();
        let act = if relu {
            Activation::Relu
        } else {
            Activation::Identity
        };
        ShapeSpec::new(layers, act).unwrap()
    })
}

fn params_pair(max_len: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (2..max_len).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0f32..3.0, n),
            prop::collection::vec(-3.0f32..3.0, n),
        )
    })
}

fn as_params(v: Vec<f32>) -> FlatParams {
    let n = v.len();
    FlatParams::new(
        ShapeSpec::new(vec![(n - 1, 1)], Activation::Identity).unwrap(),
        v,
    )
    .unwrap()
}

fn entry_strategy() -> impl Strategy<Value = UpdateEntry> {
    (
        0u32..1000,
        -1.0f32..=1.0,
        0.0f32..10.0,
        prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..9),
    )
        .prop_map(|(package_index, theta, beta, payload)| UpdateEntry {
            package_index,
            theta,
            beta,
            payload,
        })
}

proptest! {
    #[test]
    fn flatten_roundtrip(shape in shape_strategy(), seed in any::<u64>()) {
        let n = shape.total_params();
        let values: Vec<f32> = (0..n).map(|i| ((i as u64 ^ seed) % 997) as f32 * 0.01).collect();
        let p = FlatParams::new(shape.clone(), values).unwrap();
        let layers = p.to_layers();
        prop_assert_eq!(FlatParams::from_layers(shape.clone(), &layers).unwrap(), p);
        let expected: usize = shape.layer_dims().iter().map(|&(i, o)| i * o + o).sum();
        prop_assert_eq!(n, expected);
    }

    #[test]
    fn packages_tile_exactly(total in 1usize..500, pack in 1usize..64) {
        let mut next = 0;
        let mut count = 0;
        for v in package_views(total, pack) {
            prop_assert_eq!(v.offset, next);
            prop_assert_eq!(v.offset, v.index * pack);
            prop_assert!(v.len >= 1 && v.len <= pack);
            next = v.offset + v.len;
            count += 1;
        }
        prop_assert_eq!(next, total);
        prop_assert_eq!(count, total.div_ceil(pack));
    }

    #[test]
    fn kl_nonnegative_and_zero_on_self((a, b) in params_pair(40)) {
        prop_assert!(kl_package(&a, &b).unwrap() >= 0.0);
        prop_assert!(kl_package(&a, &a).unwrap().abs() < 1e-12);
        let c = cosine(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn kl_ignores_constant_shift(a in prop::collection::vec(-3.0f32..3.0, 2..20), shift in -2.0f32..2.0) {
        // softmax is shift invariant, so the normalized distributions match
        let b: Vec<f32> = a.iter().map(|x| x + shift).collect();
        prop_assert!(kl_package(&a, &b).unwrap() < 1e-9);
    }

    #[test]
    fn selection_bounds_and_mask_consistency(
        (a, b) in params_pair(120),
        pack in 1usize..16,
        cap in 0.01f64..=1.0,
    ) {
        let (l, g) = (as_params(a), as_params(b));
        let prof = score_packages(&l, &g, pack).unwrap();
        let sel = select_topk(&prof, cap).unwrap();
        let j = prof.num_packages();
        prop_assert!(!sel.is_empty());
        prop_assert!(sel.len() <= ceil_share(cap, j));
        prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
        let mask = build_mask(&prof, &sel).unwrap();
        for k in 0..j {
            prop_assert_eq!(mask.weights[k] > 0.0, sel.contains(&k));
        }
        prop_assert!(prof.per_package_kl.iter().all(|&x| x >= 0.0 && x.is_finite()));
    }

    #[test]
    fn selection_is_scale_invariant(
        (a, b) in params_pair(80),
        pack in 1usize..12,
        scale in prop::sample::select(vec![0.5f32, 2.0, 4.0, 0.25]),
    ) {
        let (l, g) = (as_params(a.clone()), as_params(b.clone()));
        let ls = as_params(a.iter().map(|x| x * scale).collect());
        let gs = as_params(b.iter().map(|x| x * scale).collect());
        let p1 = score_packages(&l, &g, pack).unwrap();
        let p2 = score_packages(&ls, &gs, pack).unwrap();
        // power-of-two scaling is exact in f32, so cosines agree to rounding
        prop_assert!((p1.overall - p2.overall).abs() < 1e-12);
        for (x, y) in p1.per_package_cos.iter().zip(&p2.per_package_cos) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert_eq!(select_topk(&p1, 1.0).unwrap(), select_topk(&p2, 1.0).unwrap());
    }

    #[test]
    fn wire_roundtrip(
        client_id in any::<u32>(),
        round in any::<u32>(),
        mut entries in prop::collection::vec(entry_strategy(), 0..6),
    ) {
        entries.sort_by_key(|e| e.package_index);
        entries.dedup_by_key(|e| e.package_index);
        let u = PackedUpdate { client_id, round, pack: 8, entries };
        let bytes = encode_update(&u);
        let closed = 22 + u.entries.iter().map(|e| 16 + 4 * e.payload.len()).sum::<usize>();
        prop_assert_eq!(bytes.len(), closed);
        prop_assert_eq!(decode_update(&bytes).unwrap(), u);
    }

    #[test]
    fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..120)) {
        let _ = decode_update(&bytes);
    }

    #[test]
    fn partitions_cover_exactly(
        classes in 2usize..8,
        per_class in 5usize..40,
        clients in 1usize..12,
        alpha in 0.05f64..50.0,
        pathological in any::<bool>(),
        spc in 1usize..4,
        seed in any::<u64>(),
    ) {
        let data = synth_blobs(classes, 3, per_class, 0.5, seed).unwrap();
        let law = if pathological {
            PartitionLaw::Pathological { shards_per_client: spc }
        } else {
            PartitionLaw::Dirichlet { alpha }
        };
        let spec = PartitionSpec { law, num_clients: clients, seed, test_fraction: 0.2 };
        let Ok(p) = partition(&data, &spec) else {
            // only infeasible shard counts may fail
            prop_assert!(pathological && data.len() < clients * spc);
            return Ok(());
        };
        let mut seen = vec![0u8; data.len()];
        for c in &p.clients {
            for &r in &c.rows { seen[r] += 1; }
            prop_assert!(c.train.iter().all(|r| !c.test.contains(r)));
            prop_assert_eq!(c.train.len() + c.test.len(), c.rows.len());
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        prop_assert_eq!(partition(&data, &spec).unwrap(), p);
    }
}
