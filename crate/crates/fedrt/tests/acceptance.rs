//! Acceptance gate. One PASS/FAIL line per criterion; exits non-zero when
//! any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use fedrt::error::FedError;
use fedrt::harness::{
    embed_layer, prepare, run_scenarios, train_centralized, train_scenario, MetricsRow, Profile, RunSeeds, Scenario,
};
use fedrt::orchestrator::{run_in_process, FedConfig, Orchestrator};
use fedrt::transport::{channel_pair, Link};
use fedrt::wire::{deserialize_message, serialize_message, Body, Message, WireTensor, WireWeights};
use fedrt_core::aggregate::{
    aggregate_adaptive, aggregate_fedavg, ClientUpdate, ClientWeighting, ServerOptState, ServerParams, Strategy,
};
use fedrt_core::data::{ablate, partition, CentreShard, PartitionConfig, StructureRecord};
use fedrt_core::gradcheck::{GradCheck, Objective};
use fedrt_core::model::{build_network, Modalities, ModelWeights, Tap};
use fedrt_core::nn::conv::{kernel_dims, SpatialRank};
use fedrt_core::nn::{BatchNorm, Conv, Dense, Dropout, Layer, MaxPool, Mode, Sequential};
use fedrt_core::phantom::generate_cohort;
use fedrt_core::tsne::{tsne, TsneConfig};
use fedrt_core::{rng, Tensor, CLASS_NAMES};
use rand::Rng;

type Outcome = Result<String, String>;

/// Name, fragment, input, objective, mode and error bound.
type GradCase = (&'static str, Sequential<f64>, Tensor<f64>, Objective, Mode, f64);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::rng(seed);
    Tensor::from_fn(dims, |_| r.random_range(-1.0..1.0))
}

fn seq(layers: Vec<Layer<f64>>) -> Sequential<f64> {
    let mut s = Sequential::default();
    for (i, l) in layers.into_iter().enumerate() {
        s.push(format!("l{i}"), l);
    }
    s
}

fn dense(i: usize, o: usize, seed: u64) -> Layer<f64> {
    Layer::Dense(Dense {
        weight: uniform(&[i, o], seed),
        bias: uniform(&[o], seed + 1),
    })
}

fn conv(rank: SpatialRank, out: usize, inp: usize, seed: u64) -> Layer<f64> {
    Layer::Conv(Conv {
        weight: uniform(&kernel_dims(rank, out, inp), seed),
        bias: uniform(&[out], seed + 1),
        rank,
    })
}

fn batchnorm(ch: usize, seed: u64) -> BatchNorm<f64> {
    let mut bn = BatchNorm::new(ch).unwrap();
    bn.gamma = uniform(&[ch], seed).map(|g| 1.0 + 0.5 * g);
    bn.beta = uniform(&[ch], seed + 1);
    bn
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let probe = |dims: &[usize]| Objective::Linear(uniform(dims, 777));
    let mut bn_infer = batchnorm(3, 30);
    bn_infer.running_mean = uniform(&[3], 31);
    bn_infer.running_var = uniform(&[3], 32).map(|v| 1.0 + 0.5 * v);
    let pool = |rank, window: Vec<usize>| Layer::MaxPool(MaxPool { window, rank });
    let cases: Vec<GradCase> = vec![
        (
            "dense",
            seq(vec![dense(4, 3, 1)]),
            uniform(&[2, 4], 2),
            probe(&[2, 3]),
            Mode::Train,
            1e-6,
        ),
        (
            "dense+ce",
            seq(vec![dense(6, 7, 3)]),
            uniform(&[3, 6], 4),
            Objective::CrossEntropy(vec![0, 3, 6]),
            Mode::Train,
            1e-6,
        ),
        (
            "conv2d",
            seq(vec![conv(SpatialRank::Two, 3, 2, 5)]),
            uniform(&[2, 2, 5, 4], 6),
            probe(&[2, 3, 5, 4]),
            Mode::Train,
            1e-4,
        ),
        (
            "conv3d",
            seq(vec![conv(SpatialRank::Three, 3, 2, 7)]),
            uniform(&[1, 2, 4, 4, 4], 8),
            probe(&[1, 3, 4, 4, 4]),
            Mode::Train,
            1e-4,
        ),
        (
            "maxpool2d",
            seq(vec![pool(SpatialRank::Two, vec![2, 2])]),
            uniform(&[2, 2, 4, 4], 9),
            probe(&[2, 2, 2, 2]),
            Mode::Train,
            1e-4,
        ),
        (
            "maxpool3d",
            seq(vec![pool(SpatialRank::Three, vec![2, 2, 2])]),
            uniform(&[1, 2, 4, 4, 4], 10),
            probe(&[1, 2, 2, 2, 2]),
            Mode::Train,
            1e-4,
        ),
        (
            "batchnorm/train",
            seq(vec![Layer::BatchNorm(batchnorm(3, 11))]),
            uniform(&[4, 3, 3, 3], 12),
            probe(&[4, 3, 3, 3]),
            Mode::Train,
            1e-4,
        ),
        (
            "batchnorm/infer",
            seq(vec![Layer::BatchNorm(bn_infer)]),
            uniform(&[4, 3, 3, 3], 13),
            probe(&[4, 3, 3, 3]),
            Mode::Infer,
            1e-4,
        ),
        (
            "dropout",
            seq(vec![Layer::Dropout(Dropout { rate: 0.25 })]),
            uniform(&[4, 10], 14),
            probe(&[4, 10]),
            Mode::Train,
            1e-4,
        ),
        (
            "relu+flatten",
            seq(vec![Layer::Relu, Layer::Flatten]),
            uniform(&[2, 3, 2, 2], 15),
            probe(&[2, 12]),
            Mode::Train,
            1e-4,
        ),
        (
            "conv block+ce",
            seq(vec![
                conv(SpatialRank::Two, 2, 1, 16),
                Layer::BatchNorm(batchnorm(2, 17)),
                Layer::Relu,
                pool(SpatialRank::Two, vec![2, 2]),
                Layer::Flatten,
                dense(8, 7, 18),
            ]),
            uniform(&[3, 1, 4, 4], 19),
            Objective::CrossEntropy(vec![1, 4, 6]),
            Mode::Train,
            1e-4,
        ),
    ];
    let mut worst: (f64, &str) = (0.0, "");
    let mut failures = Vec::new();
    for (name, net, x, obj, mode, bound) in &cases {
        let check = GradCheck {
            mode: *mode,
            ..GradCheck::default()
        };
        let report = check.run(net, x, obj).map_err(|e| format!("{name}: {e}"))?;
        if !(report.max_relative_error < *bound) || report.checked == 0 {
            failures.push(format!("{name} {:.2e} >= {bound:.0e}", report.max_relative_error));
        }
        if report.max_relative_error > worst.0 {
            worst = (report.max_relative_error, name);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    if secs >= 60.0 {
        failures.push(format!("runtime {secs:.1}s"));
    }
    ensure(
        failures.is_empty(),
        format!(
            "{} fragments, worst {:.2e} ({}), {secs:.2}s {}",
            cases.len(),
            worst.0,
            worst.1,
            failures.join("; ")
        ),
    )
}

fn update(id: &str, w: ModelWeights<f64>, n: usize) -> ClientUpdate<f64> {
    ClientUpdate {
        centre_id: id.into(),
        weights: w,
        n_samples: n,
    }
}

fn random_weights(r: &mut impl Rng, layout: &[(&str, Vec<usize>)]) -> ModelWeights<f64> {
    ModelWeights {
        entries: layout
            .iter()
            .map(|(n, d)| (n.to_string(), Tensor::from_fn(d, |_| r.random_range(-2.0..2.0))))
            .collect(),
    }
}

fn aggregation() -> Outcome {
    let mut r = rng::rng(2024);
    let layout = [
        ("a.weight", vec![3, 4]),
        ("a.bias", vec![4]),
        ("b.bn0.running_mean", vec![2]),
    ];
    let mut fedavg_err: f64 = 0.0;
    for _ in 0..200 {
        let ups: Vec<_> = ["c", "a", "b"]
            .iter()
            .map(|id| {
                let n = r.random_range(1..50);
                update(id, random_weights(&mut r, &layout), n)
            })
            .collect();
        let got = aggregate_fedavg(&ups, ClientWeighting::BySamples).map_err(|e| e.to_string())?;
        let total: f64 = ups.iter().map(|u| u.n_samples as f64).sum();
        for (e, (_, t)) in got.entries.iter().enumerate() {
            for (i, v) in t.data().iter().enumerate() {
                let oracle: f64 = ups
                    .iter()
                    .map(|u| u.n_samples as f64 * u.weights.entries[e].1.data()[i])
                    .sum::<f64>()
                    / total;
                fedavg_err = fedavg_err.max((v - oracle).abs());
            }
        }
    }

    // Scalar server steps from w=0, Δ=0.1, default hyperparameters.
    let p = ServerParams::default();
    let scalar = |v: f64| ModelWeights {
        entries: vec![("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap())],
    };
    let (b1, b2, tau, lr, d) = (p.beta1, p.beta2, p.tau, p.lr, 0.1f64);
    let m = (1.0 - b1) * d;
    let v_adam = b2 * tau * tau + (1.0 - b2) * d * d;
    let v_yogi = tau * tau - (1.0 - b2) * d * d * (tau * tau - d * d).signum();
    let mut hand_err: f64 = 0.0;
    for (s, v) in [(Strategy::FedAdam, v_adam), (Strategy::FedYogi, v_yogi)] {
        let mut st = ServerOptState::new(&scalar(0.0), &p);
        let out = aggregate_adaptive(
            s,
            &p,
            &mut st,
            &scalar(0.0),
            &[update("a", scalar(d), 1)],
            ClientWeighting::BySamples,
        )
        .map_err(|e| e.to_string())?;
        let expect = lr * m / (v.sqrt() + tau);
        hand_err = hand_err.max((out.entries[0].1.data()[0] - expect).abs());
        hand_err = hand_err
            .max((st.m[0].data()[0] - m).abs())
            .max((st.v[0].data()[0] - v).abs());
    }

    let opt = ServerParams { lr: 1.0, ..p };
    let mut current = random_weights(&mut r, &layout);
    let mut st = ServerOptState::new(&current, &opt);
    let mut fedopt_equal = true;
    for _ in 0..20 {
        let ups: Vec<_> = ["x", "y", "z"]
            .iter()
            .map(|id| {
                let n = r.random_range(1..30);
                update(id, random_weights(&mut r, &layout), n)
            })
            .collect();
        let a = aggregate_fedavg(&ups, ClientWeighting::BySamples).map_err(|e| e.to_string())?;
        let o = aggregate_adaptive(
            Strategy::FedOpt,
            &opt,
            &mut st,
            &current,
            &ups,
            ClientWeighting::BySamples,
        )
        .map_err(|e| e.to_string())?;
        for ((_, ta), (_, to)) in a.entries.iter().zip(&o.entries) {
            for (x, y) in ta.data().iter().zip(to.data()) {
                fedopt_equal &= (x - y).abs() <= 1e-12 * x.abs().max(1.0);
            }
        }
        current = o;
    }
    ensure(
        fedavg_err <= 1e-12 && hand_err <= 1e-9 && fedopt_equal,
        format!("fedavg max err {fedavg_err:.1e}, adam/yogi max err {hand_err:.1e}, fedopt(lr=1)==fedavg on 20 rounds: {fedopt_equal}"),
    )
}

fn reduction(profile: &Profile, records: &[StructureRecord]) -> Outcome {
    let p = prepare(records, 1, profile.holdout_patients, profile.cohort_seed).map_err(|e| e.to_string())?;
    let spec = profile.spec(Modalities::TABULAR_VOLUME).map_err(|e| e.to_string())?;
    let seeds = RunSeeds::new(0);
    let (_, init) = build_network::<f32>(&spec, seeds.init).map_err(|e| e.to_string())?;
    let ids = vec![p.shards[0].centre_id.clone()];
    let fed = run_in_process(
        FedConfig::new(Strategy::FedAvg, 5, ids),
        &spec,
        &p.shards,
        &[seeds.client(0)],
        init.clone(),
    )
    .map_err(|e| e.to_string())?;
    let central = train_centralized(&spec, &p.shards, seeds.client(0), 5, init).map_err(|e| e.to_string())?;
    let same_metrics = fed.history.iter().zip(&central.history).all(|(a, b)| {
        a.val_accuracy.to_bits() == b.val_accuracy.to_bits() && a.val_loss.to_bits() == b.val_loss.to_bits()
    });
    let bits = |w: &ModelWeights<f32>| -> Vec<u32> {
        w.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()))
            .collect()
    };
    let same_weights = bits(&fed.last) == bits(&central.last) && bits(&fed.best) == bits(&central.best);
    ensure(
        same_weights && same_metrics,
        format!(
            "{} parameters over 5 rounds, weights bit-identical: {same_weights}, validation metrics bit-identical: {same_metrics}",
            bits(&fed.last).len()
        ),
    )
}

fn random_weights_wire(r: &mut impl Rng) -> WireWeights {
    let n = r.random_range(0..5);
    WireWeights(
        (0..n)
            .map(|i| {
                let dims: Vec<usize> = (0..r.random_range(1..4)).map(|_| r.random_range(1..5)).collect();
                let t = if r.random_bool(0.5) {
                    WireTensor::F32(Tensor::from_fn(&dims, |_| f32::from_bits(r.random())))
                } else {
                    WireTensor::F64(Tensor::from_fn(&dims, |_| f64::from_bits(r.random())))
                };
                (format!("layer{i}.weight"), t)
            })
            .collect(),
    )
}

fn random_message(r: &mut impl Rng) -> Message {
    let body = match r.random_range(0..7) {
        0 => Body::Configure {
            centre_id: format!("centre-{}", r.random::<u16>()),
            n_train: r.random(),
            n_val: r.random(),
        },
        1 => Body::TrainRequest {
            weights: random_weights_wire(r),
        },
        2 => Body::TrainResponse {
            weights: random_weights_wire(r),
            n_train: r.random(),
            loss: f64::from_bits(r.random()),
        },
        3 => Body::EvalRequest {
            weights: random_weights_wire(r),
        },
        4 => Body::EvalResponse {
            accuracy: f64::from_bits(r.random()),
            loss: f64::from_bits(r.random()),
            n: r.random(),
        },
        5 => Body::Shutdown,
        _ => Body::Error {
            message: (0..r.random_range(0..20)).map(|_| r.random_range('a'..='ü')).collect(),
        },
    };
    Message::new(r.random(), body)
}

fn protocol() -> Outcome {
    let mut r = rng::rng(7);
    let (mut exact, mut rejected, mut corrupted) = (0usize, 0usize, 0usize);
    for _ in 0..10_000 {
        let m = random_message(&mut r);
        let bytes = serialize_message(&m).map_err(|e| e.to_string())?;
        if let Ok(back) = deserialize_message(&bytes) {
            if serialize_message(&back).ok().as_deref() == Some(&bytes[..]) && back.round == m.round {
                exact += 1;
            }
        }
        let mut flipped = bytes.clone();
        let i = r.random_range(0..flipped.len());
        flipped[i] ^= 1 << r.random_range(0..8);
        let cut = r.random_range(0..bytes.len());
        corrupted += 2;
        rejected += deserialize_message(&flipped).is_err() as usize;
        rejected += deserialize_message(&bytes[..cut]).is_err() as usize;
    }

    let timeout = Duration::from_millis(1000);
    let (server, mut client) = channel_pair();
    let stalled = thread::spawn(move || {
        let hello = Message::new(
            0,
            Body::Configure {
                centre_id: "silent".into(),
                n_train: 4,
                n_val: 2,
            },
        );
        client.send(&hello).unwrap();
        while let Ok(m) = client.recv(None) {
            if m.body == Body::Shutdown {
                break;
            }
        }
    });
    let mut cfg = FedConfig::new(Strategy::FedAvg, 3, vec!["silent".into()]);
    cfg.timeout = timeout;
    let mut orch = Orchestrator::connect(cfg, vec![Box::new(server)]).map_err(|e| e.to_string())?;
    let init = ModelWeights {
        entries: vec![("w".to_string(), Tensor::new(vec![1], vec![0.0f32]).unwrap())],
    };
    let started = Instant::now();
    let result = orch.run(init);
    let elapsed = started.elapsed();
    drop(orch);
    stalled.join().map_err(|_| "stalled client panicked".to_string())?;
    let aborted = matches!(&result, Err(a) if matches!(a.error, FedError::Stalled { .. }));
    ensure(
        exact == 10_000 && rejected == corrupted && aborted && elapsed < timeout + Duration::from_secs(1),
        format!(
            "{exact}/10000 bit-exact, {rejected}/{corrupted} corrupted frames rejected, stall abort={aborted} after {:.2}s (timeout {:.0}s)",
            elapsed.as_secs_f64(),
            timeout.as_secs_f64()
        ),
    )
}

fn accuracies(rows: &[MetricsRow]) -> Vec<f64> {
    rows.iter().map(|r| r.accuracy.unwrap_or(f64::NAN)).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn end_to_end(rows: &[MetricsRow]) -> Outcome {
    let r = &rows[0];
    let acc = r.accuracy.ok_or_else(|| format!("run failed: {:?}", r.error))?;
    ensure(
        acc >= 0.90 && r.wall_secs < 300.0,
        format!(
            "hold-out accuracy {acc:.4} (>= 0.90), runtime {:.1}s (< 300s)",
            r.wall_secs
        ),
    )
}

fn ordering(vol: &[MetricsRow], vis: &[MetricsRow], tab: &[MetricsRow]) -> Outcome {
    let (a, b, c) = (mean(&accuracies(vol)), mean(&accuracies(vis)), mean(&accuracies(tab)));
    let (m1, m2) = (a - b, b - c);
    ensure(
        m1 >= -0.02 && m2 >= -0.02,
        format!("tabular+volume {a:.4}, tabular+visual {b:.4}, tabular {c:.4}; margins {m1:+.4}, {m2:+.4} (>= -0.02)"),
    )
}

fn gap(central: &[MetricsRow], federated: &[(Strategy, Vec<MetricsRow>)]) -> Outcome {
    let c = mean(&accuracies(central));
    let mut parts = vec![format!("centralized {c:.4}")];
    let mut ok = c.is_finite();
    for (s, rows) in federated {
        let f = mean(&accuracies(rows));
        let g = (f - c).abs();
        ok &= g <= 0.05;
        parts.push(format!("{s} {f:.4} (gap {g:.4})"));
    }
    ensure(ok, parts.join(", "))
}

fn ablation(full: &[MetricsRow], quarter: &[MetricsRow]) -> Outcome {
    let gtv = CLASS_NAMES
        .iter()
        .position(|n| n.starts_with("GTV"))
        .ok_or("no GTV class")?;
    let shard = CentreShard {
        centre_id: "c0".into(),
        train: (0..10)
            .map(|i| StructureRecord {
                patient_id: format!("P{i}"),
                label: gtv,
                tabular: [0.0; 9],
                slice: None,
                volume: None,
            })
            .collect(),
        validation: vec![],
    };
    let counts: Vec<usize> = [1.0, 0.5, 0.25]
        .iter()
        .map(|&f| ablate(&shard, f, 1).map(|s| s.train.len()).unwrap_or(usize::MAX))
        .collect();
    let (a, q) = (mean(&accuracies(full)), mean(&accuracies(quarter)));
    ensure(
        q < a - 0.05 && counts == [10, 5, 3],
        format!(
            "7 centres: fraction 1.0 {a:.4}, fraction 0.25 {q:.4}, drop {:.4} (> 0.05); ablate counts {counts:?}",
            a - q
        ),
    )
}

fn gaussian_fixture() -> Tensor<f64> {
    let mut r = rng::rng(3);
    let normal = |r: &mut rng::Rng| -> f64 {
        let (u1, u2): (f64, f64) = (r.random_range(f64::EPSILON..1.0), r.random());
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let mut data = Vec::with_capacity(150 * 10);
    for i in 0..150 {
        let c = i / 50;
        for d in 0..10 {
            let centre = if d == c { 10.0 } else { 0.0 };
            data.push(centre + normal(&mut r));
        }
    }
    Tensor::new(vec![150, 10], data).unwrap()
}

fn embedding(profile: &Profile, records: &[StructureRecord]) -> Outcome {
    let cfg = TsneConfig::default();
    let g = tsne(&gaussian_fixture(), &cfg).map_err(|e| e.to_string())?;
    let perp_err = g
        .perplexities
        .iter()
        .map(|p| (p - cfg.perplexity).abs())
        .fold(0.0, f64::max);
    let (kl250, kl1000) = (
        g.kl_at(250).ok_or("no KL at 250")?,
        g.kl_at(1000).ok_or("no KL at 1000")?,
    );

    let p = prepare(records, 3, profile.holdout_patients, profile.cohort_seed).map_err(|e| e.to_string())?;
    let spec = profile.spec(Modalities::TABULAR_VOLUME).map_err(|e| e.to_string())?;
    let scenario = Scenario::federated(3, Strategy::FedAvg, Modalities::TABULAR_VOLUME, profile.rounds);
    let trained = train_scenario(&scenario, &p, &spec, 0).map_err(|e| e.to_string())?.best;
    let (_, untrained) = build_network::<f32>(&spec, RunSeeds::new(0).init).map_err(|e| e.to_string())?;
    let s_trained = embed_layer(&trained, &p.test, &spec, Tap::FusionHidden, &cfg).map_err(|e| e.to_string())?;
    let s_untrained = embed_layer(&untrained, &p.test, &spec, Tap::FusionHidden, &cfg).map_err(|e| e.to_string())?;
    let phantom_perp = s_trained
        .embedding
        .perplexities
        .iter()
        .map(|x| (x - fedrt::harness::effective_perplexity(cfg.perplexity, p.test.len())).abs())
        .fold(0.0, f64::max);
    ensure(
        perp_err < 1e-3 && phantom_perp < 1e-3 && kl1000 < kl250 && s_trained.silhouette > s_untrained.silhouette,
        format!(
            "perplexity err {perp_err:.1e} / {phantom_perp:.1e}, KL@250 {kl250:.4} > KL@1000 {kl1000:.4}, fusion silhouette trained {:.3} vs untrained {:.3} on {} hold-out records",
            s_trained.silhouette,
            s_untrained.silhouette,
            p.test.len()
        ),
    )
}

fn bookkeeping() -> Outcome {
    let profile = Profile::paper();
    let recs = generate_cohort(
        profile.n_patients,
        profile.cohort_seed,
        &profile.phantom,
        &Profile::desk().extract,
    )
    .map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    for (centres, expect) in [(3usize, 124i64), (5, 74), (7, 53)] {
        let p = partition(
            &recs,
            &PartitionConfig {
                n_centres: centres,
                holdout_patients: profile.holdout_patients,
                ..PartitionConfig::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let test: BTreeSet<_> = p.test.iter().map(|r| &r.patient_id).collect();
        let counts: Vec<i64> = p.shards.iter().map(|s| s.patients().len() as i64).collect();
        let dev: i64 = counts.iter().sum();
        ok &= test.len() == 50 && dev == 372 && counts.iter().all(|c| (c - expect).abs() <= 1);
        parts.push(format!("{centres} centres {dev}/{} {counts:?}", test.len()));
    }
    ensure(ok, parts.join("; "))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let profile = Profile::desk();
    let records = profile.generate().expect("desk cohort");
    let seeds = vec![0, 1, 2];
    let rounds = profile.rounds;
    let fed = |s, m| Scenario::federated(3, s, m, rounds).with_seeds(seeds.clone());
    let mut scenarios = vec![
        fed(Strategy::FedAvg, Modalities::TABULAR_VOLUME),
        fed(Strategy::FedAvg, Modalities::TABULAR_VISUAL),
        fed(Strategy::FedAvg, Modalities::TABULAR),
        Scenario::centralized(Modalities::TABULAR_VOLUME, rounds).with_seeds(seeds.clone()),
        fed(Strategy::FedOpt, Modalities::TABULAR_VOLUME),
        fed(Strategy::FedAdam, Modalities::TABULAR_VOLUME),
        fed(Strategy::FedYogi, Modalities::TABULAR_VOLUME),
    ];
    for fraction in [1.0, 0.25] {
        scenarios.push(
            Scenario::federated(7, Strategy::FedAvg, Modalities::TABULAR_VOLUME, rounds)
                .with_fraction(fraction)
                .with_seeds(seeds.clone()),
        );
    }
    let rows = run_scenarios(&scenarios, &records, &profile, 1).expect("benchmark runs");
    let cells: Vec<&[MetricsRow]> = rows.chunks(seeds.len()).collect();
    let federated: Vec<(Strategy, Vec<MetricsRow>)> = [
        (Strategy::FedAvg, 0),
        (Strategy::FedOpt, 4),
        (Strategy::FedAdam, 5),
        (Strategy::FedYogi, 6),
    ]
    .into_iter()
    .map(|(s, i)| (s, cells[i].to_vec()))
    .collect();

    let results: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", gradients()),
        ("aggregation oracles", aggregation()),
        ("federated = centralized reduction", reduction(&profile, &records)),
        ("protocol", protocol()),
        ("end-to-end desk benchmark", end_to_end(cells[0])),
        ("modality ordering", ordering(cells[0], cells[1], cells[2])),
        ("federated vs centralized gap", gap(cells[3], &federated)),
        ("ablation", ablation(cells[7], cells[8])),
        ("t-SNE", embedding(&profile, &records)),
        ("partition bookkeeping", bookkeeping()),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!(
        "{} passed, {failed} failed in {:.1}s",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
