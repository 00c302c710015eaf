use fedrt_core::gradcheck::{GradCheck, Objective};
use fedrt_core::nn::conv::{kernel_dims, SpatialRank};
use fedrt_core::nn::{BatchNorm, Conv, Dense, Dropout, Layer, MaxPool, Mode, Sequential};
use fedrt_core::rng;
use fedrt_core::Tensor;
use rand::Rng;

fn uniform(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::rng(seed);
    Tensor::from_fn(dims, |_| r.random_range(-1.0..1.0))
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

fn batchnorm(ch: usize, seed: u64) -> Layer<f64> {
    let mut bn = BatchNorm::new(ch).unwrap();
    bn.gamma = uniform(&[ch], seed).map(|g| 1.0 + 0.5 * g);
    bn.beta = uniform(&[ch], seed + 1);
    Layer::BatchNorm(bn)
}

fn seq(layers: Vec<Layer<f64>>) -> Sequential<f64> {
    let mut s = Sequential::default();
    for (i, l) in layers.into_iter().enumerate() {
        s.push(format!("l{i}"), l);
    }
    s
}

fn linear_probe(dims: &[usize]) -> Objective {
    Objective::Linear(uniform(dims, 777))
}

fn check(net: &Sequential<f64>, x: &Tensor<f64>, obj: &Objective) -> f64 {
    let report = GradCheck::default().run(net, x, obj).unwrap();
    assert!(report.checked > 0);
    println!(
        "max relative error {:.3e} at {}",
        report.max_relative_error, report.worst
    );
    report.max_relative_error
}

#[test]
fn dense_layer() {
    let net = seq(vec![dense(4, 3, 1)]);
    let x = uniform(&[2, 4], 2);
    assert!(check(&net, &x, &linear_probe(&[2, 3])) < 1e-6);
    assert!(check(&net, &x, &Objective::CrossEntropy(vec![0, 2])) < 1e-6);
}

#[test]
fn pure_linear_fragment() {
    let net = seq(vec![dense(5, 4, 3), dense(4, 2, 5)]);
    let x = uniform(&[3, 5], 4);
    assert!(check(&net, &x, &linear_probe(&[3, 2])) < 1e-8);
}

#[test]
fn dense_relu_cross_entropy() {
    let net = seq(vec![dense(6, 8, 7), Layer::Relu, dense(8, 7, 9)]);
    let x = uniform(&[4, 6], 8);
    assert!(check(&net, &x, &Objective::CrossEntropy(vec![0, 3, 6, 2])) < 1e-5);
}

#[test]
fn conv2d_layer() {
    let net = seq(vec![conv(SpatialRank::Two, 3, 2, 11)]);
    let x = uniform(&[2, 2, 5, 4], 12);
    assert!(check(&net, &x, &linear_probe(&[2, 3, 5, 4])) < 1e-4);
}

#[test]
fn conv3d_layer() {
    let net = seq(vec![conv(SpatialRank::Three, 3, 2, 13)]);
    let x = uniform(&[1, 2, 4, 4, 4], 14);
    assert!(check(&net, &x, &linear_probe(&[1, 3, 4, 4, 4])) < 1e-4);
}

#[test]
fn maxpool_layers() {
    let net = seq(vec![Layer::MaxPool(MaxPool {
        window: vec![2, 2],
        rank: SpatialRank::Two,
    })]);
    let x = uniform(&[2, 2, 4, 4], 15);
    assert!(check(&net, &x, &linear_probe(&[2, 2, 2, 2])) < 1e-4);

    let net = seq(vec![Layer::MaxPool(MaxPool {
        window: vec![2, 2, 2],
        rank: SpatialRank::Three,
    })]);
    let x = uniform(&[1, 2, 4, 4, 4], 16);
    assert!(check(&net, &x, &linear_probe(&[1, 2, 2, 2, 2])) < 1e-4);
}

#[test]
fn batchnorm_train_and_infer() {
    let net = seq(vec![batchnorm(3, 17)]);
    let x = uniform(&[4, 3, 3, 3], 18);
    assert!(check(&net, &x, &linear_probe(&[4, 3, 3, 3])) < 1e-4);

    let mut with_stats = net.clone();
    if let Layer::BatchNorm(bn) = &mut with_stats.layers[0].1 {
        bn.running_mean = uniform(&[3], 19);
        bn.running_var = uniform(&[3], 20).map(|v| 1.0 + 0.5 * v);
    }
    let infer = GradCheck {
        mode: Mode::Infer,
        ..GradCheck::default()
    };
    let report = infer.run(&with_stats, &x, &linear_probe(&[4, 3, 3, 3])).unwrap();
    assert!(report.max_relative_error < 1e-4);
}

#[test]
fn batchnorm_feeding_cross_entropy() {
    let net = seq(vec![dense(5, 7, 21), batchnorm(7, 22)]);
    let x = uniform(&[6, 5], 23);
    assert!(check(&net, &x, &Objective::CrossEntropy(vec![0, 1, 2, 3, 4, 5])) < 1e-4);
}

#[test]
fn dropout_with_frozen_mask() {
    let net = seq(vec![Layer::Dropout(Dropout { rate: 0.25 })]);
    let x = uniform(&[4, 10], 24);
    assert!(check(&net, &x, &linear_probe(&[4, 10])) < 1e-4);
}

#[test]
fn relu_and_flatten() {
    let net = seq(vec![Layer::Relu, Layer::Flatten]);
    let x = uniform(&[2, 3, 2, 2], 25);
    assert!(check(&net, &x, &linear_probe(&[2, 12])) < 1e-4);
}

#[test]
fn full_conv_block_to_logits() {
    let mut layers = Vec::new();
    let mut c_in = 1;
    for (i, c) in [4usize, 6, 8].into_iter().enumerate() {
        let s = 100 + 10 * i as u64;
        layers.push(conv(SpatialRank::Two, c, c_in, s));
        layers.push(batchnorm(c, s + 2));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool(MaxPool {
            window: vec![2, 2],
            rank: SpatialRank::Two,
        }));
        layers.push(Layer::Dropout(Dropout { rate: 0.25 }));
        c_in = c;
    }
    layers.push(Layer::Flatten);
    layers.push(dense(8, 7, 140));
    let net = seq(layers);
    let x = uniform(&[3, 1, 8, 8], 141);
    assert!(check(&net, &x, &Objective::CrossEntropy(vec![1, 4, 6])) < 1e-4);
}

#[test]
fn volume_block() {
    let net = seq(vec![
        conv(SpatialRank::Three, 2, 1, 150),
        batchnorm(2, 151),
        Layer::Relu,
        Layer::MaxPool(MaxPool {
            window: vec![2, 2, 2],
            rank: SpatialRank::Three,
        }),
        Layer::Dropout(Dropout { rate: 0.25 }),
        Layer::Flatten,
        dense(16, 7, 152),
    ]);
    let x = uniform(&[2, 1, 4, 4, 4], 153);
    assert!(check(&net, &x, &Objective::CrossEntropy(vec![2, 5])) < 1e-4);
}
