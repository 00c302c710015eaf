use std::collections::BTreeSet;

use fedrt_core::aggregate::{
    aggregate_adaptive, aggregate_fedavg, ClientUpdate, ClientWeighting, ServerOptState, ServerParams,
    Strategy as FedStrategy,
};
use fedrt_core::data::{
    ablate, class_counts, partition, CentreShard, PartitionConfig, StructureRecord, TABULAR_FEATURES,
};
use fedrt_core::loss::{softmax, softmax_cross_entropy};
use fedrt_core::model::ModelWeights;
use fedrt_core::nn::conv::SpatialRank;
use fedrt_core::nn::dropout::dropout_forward;
use fedrt_core::nn::pool::{maxpool_backward, maxpool_forward};
use fedrt_core::nn::Mode;
use fedrt_core::{Tensor, NUM_CLASSES};
use proptest::prelude::*;

fn tensor(dims: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = dims.iter().product();
    prop::collection::vec(-20.0f64..20.0, n).prop_map(move |d| Tensor::new(dims.clone(), d).unwrap())
}

fn weights(values: Vec<f64>) -> ModelWeights<f64> {
    let (a, b) = values.split_at(values.len() / 2);
    ModelWeights {
        entries: vec![
            (
                "x.dense0.weight".into(),
                Tensor::new(vec![a.len()], a.to_vec()).unwrap(),
            ),
            (
                "x.bn0.running_var".into(),
                Tensor::new(vec![b.len()], b.to_vec()).unwrap(),
            ),
        ],
    }
}

fn updates() -> impl Strategy<Value = Vec<ClientUpdate<f64>>> {
    (2usize..10).prop_flat_map(updates_of)
}

fn updates_of(n: usize) -> impl Strategy<Value = Vec<ClientUpdate<f64>>> {
    (1usize..6).prop_flat_map(move |k| {
        prop::collection::vec((prop::collection::vec(-5.0f64..5.0, n), 1usize..200), k).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (w, s))| ClientUpdate {
                    centre_id: format!("centre-{i:02}"),
                    weights: weights(w),
                    n_samples: s,
                })
                .collect()
        })
    })
}

fn records(n_patients: usize, per_patient: usize, seed: u64) -> Vec<StructureRecord> {
    (0..n_patients)
        .flat_map(|p| {
            (0..per_patient).map(move |k| StructureRecord {
                patient_id: format!("P{p:04}"),
                label: (p as u64 * 31 + k as u64 * 7 + seed) as usize % NUM_CLASSES,
                tabular: [p as f64; TABULAR_FEATURES],
                slice: None,
                volume: None,
            })
        })
        .collect()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(logits in (1usize..6, 2usize..9).prop_flat_map(|(b, k)| tensor(vec![b, k]))) {
        let p = softmax(&logits).unwrap();
        let k = logits.dims()[1];
        for row in p.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let labels: Vec<usize> = (0..logits.dims()[0]).map(|i| i % k).collect();
        prop_assert!(softmax_cross_entropy(&logits, &labels).unwrap().loss >= 0.0);
    }

    #[test]
    fn maxpool_backward_conserves_mass(x in tensor(vec![2, 3, 4, 6]), g in tensor(vec![2, 3, 2, 3])) {
        let (_, arg) = maxpool_forward(&x, &[2, 2], SpatialRank::Two).unwrap();
        let gx = maxpool_backward(x.dims(), &arg, &g).unwrap();
        prop_assert!((gx.sum() - g.sum()).abs() < 1e-9);
    }

    #[test]
    fn dropout_infer_is_identity(x in tensor(vec![3, 7]), rate in 0.0f64..0.95, seed in any::<u64>()) {
        let (y, mask) = dropout_forward(&x, rate, Mode::Infer, seed).unwrap();
        prop_assert_eq!(y, x);
        prop_assert!(mask.is_none());
    }

    #[test]
    fn dropout_mask_depends_only_on_seed(x in tensor(vec![4, 5]), seed in any::<u64>()) {
        let a = dropout_forward(&x, 0.25, Mode::Train, seed).unwrap();
        let b = dropout_forward(&x, 0.25, Mode::Train, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fedavg_ignores_arrival_order(ups in updates(), rot in 0usize..5) {
        let mut shuffled = ups.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        shuffled.reverse();
        let a = aggregate_fedavg(&ups, ClientWeighting::BySamples).unwrap();
        let b = aggregate_fedavg(&shuffled, ClientWeighting::BySamples).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fedavg_matches_brute_force(ups in updates()) {
        let out = aggregate_fedavg(&ups, ClientWeighting::BySamples).unwrap();
        let total: usize = ups.iter().map(|u| u.n_samples).sum();
        for (e, (_, t)) in out.entries.iter().enumerate() {
            for (i, &v) in t.data().iter().enumerate() {
                let oracle: f64 = ups
                    .iter()
                    .map(|u| u.weights.entries[e].1.data()[i] * u.n_samples as f64)
                    .sum::<f64>()
                    / total as f64;
                prop_assert!((v - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn null_pseudo_gradient_is_a_fixed_point(w in prop::collection::vec(-3.0f64..3.0, 4..12), k in 1usize..5) {
        let current = weights(w);
        let ups: Vec<_> = (0..k)
            .map(|i| ClientUpdate { centre_id: format!("c{i}"), weights: current.clone(), n_samples: 10 + i })
            .collect();
        let params = ServerParams::default();
        for strategy in FedStrategy::ALL {
            let mut state = ServerOptState::new(&current, &params);
            let mut w = current.clone();
            for _ in 0..3 {
                w = aggregate_adaptive(strategy, &params, &mut state, &w, &ups, ClientWeighting::BySamples).unwrap();
            }
            prop_assert_eq!(&w, &current, "{}", strategy);
        }
    }

    #[test]
    fn fedopt_unit_lr_equals_fedavg(cur in prop::collection::vec(-5.0f64..5.0, 6), ups in updates_of(6)) {
        let current = weights(cur);
        let params = ServerParams { lr: 1.0, ..ServerParams::default() };
        let mut state = ServerOptState::new(&current, &params);
        let opt = aggregate_adaptive(FedStrategy::FedOpt, &params, &mut state, &current, &ups, ClientWeighting::BySamples).unwrap();
        let avg = aggregate_fedavg(&ups, ClientWeighting::BySamples).unwrap();
        for ((_, a), (_, b)) in opt.entries.iter().zip(&avg.entries) {
            prop_assert!(a.max_abs_diff(b) <= 1e-12);
        }
    }

    #[test]
    fn partition_is_patient_disjoint(n in 30usize..120, centres in 1usize..8, seed in any::<u64>()) {
        let recs = records(n, 3, seed);
        let cfg = PartitionConfig { n_centres: centres, holdout_patients: 10, val_frac: 0.2, seed };
        let p = partition(&recs, &cfg).unwrap();
        let mut seen = BTreeSet::new();
        let mut total = p.test.len();
        let test_ids: BTreeSet<&str> = p.test.iter().map(|r| r.patient_id.as_str()).collect();
        for s in &p.shards {
            let train: BTreeSet<&str> = s.train.iter().map(|r| r.patient_id.as_str()).collect();
            let val: BTreeSet<&str> = s.validation.iter().map(|r| r.patient_id.as_str()).collect();
            prop_assert!(train.is_disjoint(&val));
            for id in train.union(&val) {
                prop_assert!(seen.insert(*id), "patient {} in two centres", id);
                prop_assert!(!test_ids.contains(id));
            }
            total += s.train.len() + s.validation.len();
        }
        prop_assert_eq!(total, recs.len());
        let sizes: Vec<usize> = p.shards.iter().map(|s| s.patients().len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn ablation_keeps_every_class(frac in prop::sample::select(vec![1.0, 0.5, 0.25]), seed in any::<u64>(), n in 5usize..60) {
        let shard = CentreShard { centre_id: "centre-00".into(), train: records(n, 4, seed), validation: records(2, 1, seed) };
        let out = ablate(&shard, frac, seed).unwrap();
        let before = class_counts(&shard.train);
        let after = class_counts(&out.train);
        for c in 0..NUM_CLASSES {
            prop_assert_eq!(after[c], (frac * before[c] as f64).ceil() as usize);
            if before[c] > 0 {
                prop_assert!(after[c] >= 1);
            }
        }
        prop_assert_eq!(out.validation, shard.validation);
    }

    #[test]
    fn tensor_cast_round_trip(x in tensor(vec![3, 4])) {
        let f: Tensor<f32> = x.cast();
        let back: Tensor<f64> = f.cast();
        let again: Tensor<f32> = back.cast();
        prop_assert_eq!(f, again);
    }
}
