//! Optimizer updates, training loops and evaluation.

mod common;

use cobprune::data::{gen_synthetic, Dataset};
use cobprune::nn::{mlp, ActivationKind, Layer, Model, TsraParams};
use cobprune::pruning::{select_fixed_ratio, surgery, ImportanceReport};
use cobprune::rng::Rng;
use cobprune::train::{evaluate, finetune, optimizer_step, train, OptimizerKind, OptimizerState, TrainConfig};
use cobprune::Tensor;
use common::cross_entropy_f64;

/// Two well separated Gaussian blobs in 4-d.
fn blobs(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let mut x = Vec::with_capacity(n * 4);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let centre = if c == 0 { -1.5 } else { 1.5 };
        for _ in 0..4 {
            x.push((centre + 0.5 * rng.normal()) as f32);
        }
        y.push(c);
    }
    Dataset::new(Tensor::new(vec![n, 4], x).unwrap(), y, 2).unwrap()
}

fn mean_loss(m: &Model, d: &Dataset) -> f64 {
    cross_entropy_f64(&m.forward(&d.images).unwrap(), &d.labels)
}

#[test]
fn loss_falls_during_the_first_epoch() {
    let data = blobs(256, 1);
    for kind in [OptimizerKind::SgdNesterov, OptimizerKind::AdamW] {
        let m = mlp(vec![4], &[8, 2], ActivationKind::Tsra(TsraParams::default()), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::for_optimizer(kind)
        };
        let (trained, hist) = train(&m, &data, &cfg).unwrap();
        assert_eq!(hist.len(), 1);
        let (before, after) = (mean_loss(&m, &data), mean_loss(&trained, &data));
        assert!(after < before, "{}: {before} -> {after}", kind.name());
    }
}

#[test]
fn mlp_learns_the_synthetic_images() {
    let data = gen_synthetic(2, 30).unwrap();
    let m = mlp(vec![3, 16, 16], &[64, 10], ActivationKind::Tsra(TsraParams::default()), 2).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 32,
        ..TrainConfig::adamw()
    };
    let (trained, hist) = train(&m, &data, &cfg).unwrap();
    assert!(hist.last().unwrap().loss < hist[0].loss);
    let acc = evaluate(&trained, &data).unwrap();
    assert!(acc >= 0.8, "train accuracy {acc}");
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    for kind in [OptimizerKind::SgdNesterov, OptimizerKind::AdamW] {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::for_optimizer(kind)
        };
        let mut p = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut state = OptimizerState::new(&[3], vec![0]);
        for _ in 0..3 {
            optimizer_step(&mut [&mut p], &[&[0.0; 3]], &mut state, &cfg, cfg.lr).unwrap();
        }
        assert_eq!(p, before);
    }
}

#[test]
fn sgd_without_momentum_is_gradient_descent() {
    let cfg = TrainConfig {
        momentum: 0.0,
        weight_decay: 0.0,
        ..TrainConfig::sgd_nesterov()
    };
    let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
    let g = [0.5f32, 4.0];
    let mut state = OptimizerState::new(&[2], vec![0]);
    optimizer_step(&mut [&mut p], &[&g], &mut state, &cfg, 0.1).unwrap();
    assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 4.0]);
}

#[test]
fn nesterov_second_step_matches_hand_evaluation() {
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::sgd_nesterov()
    };
    let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
    let mut state = OptimizerState::new(&[1], vec![0]);
    optimizer_step(&mut [&mut p], &[&[1.0]], &mut state, &cfg, 0.1).unwrap();
    optimizer_step(&mut [&mut p], &[&[1.0]], &mut state, &cfg, 0.1).unwrap();
    // v1 = 1, p1 = 1 - 0.1 (1 + 0.9); v2 = 1.9, p2 = p1 - 0.1 (1 + 0.9 * 1.9).
    let want = 1.0 - 0.1 * 1.9 - 0.1 * (1.0 + 0.9 * 1.9);
    assert!((p.data()[0] as f64 - want).abs() < 1e-6);
}

#[test]
fn constant_logits_score_chance() {
    let data = gen_synthetic(3, 5).unwrap();
    let m = Model::new(
        vec![3, 16, 16],
        vec![Layer::Dense {
            weight: Tensor::zeros(&[10, 768]),
            bias: Tensor::zeros(&[10]),
        }],
    )
    .unwrap();
    assert_eq!(evaluate(&m, &data).unwrap(), 0.1);
}

#[test]
fn one_hot_memorizer_is_perfect_and_order_free() {
    let n = 20;
    let mut x = vec![0.0f32; n * 5];
    let labels: Vec<usize> = (0..n).map(|i| (i * 7) % 5).collect();
    for (i, &y) in labels.iter().enumerate() {
        x[i * 5 + y] = 1.0;
    }
    let data = Dataset::new(Tensor::new(vec![n, 5], x).unwrap(), labels, 5).unwrap();
    let m = Model::new(
        vec![5],
        vec![Layer::Dense {
            weight: Tensor::eye(5),
            bias: Tensor::zeros(&[5]),
        }],
    )
    .unwrap();
    assert_eq!(evaluate(&m, &data).unwrap(), 1.0);

    let d = blobs(64, 4);
    let m = mlp(vec![4], &[4, 2], ActivationKind::Relu, 4).unwrap();
    let mut idx: Vec<usize> = (0..d.len()).collect();
    Rng::new(5).shuffle(&mut idx);
    let (xs, ys) = d.gather(&idx).unwrap();
    let shuffled = Dataset::new(xs, ys, 2).unwrap();
    assert_eq!(evaluate(&m, &d).unwrap(), evaluate(&m, &shuffled).unwrap());
}

#[test]
fn finetuning_a_pruned_model_keeps_its_shape() {
    let data = blobs(128, 6);
    let m = mlp(vec![4], &[8, 8, 2], ActivationKind::Tsra(TsraParams::default()), 6).unwrap();
    let rep = ImportanceReport::measure(&m, &data.images).unwrap();
    let (pruned, stats) = surgery(&m, &select_fixed_ratio(&rep, 0.5).unwrap()).unwrap();
    let cfg = TrainConfig {
        finetune_epochs: 2,
        ..TrainConfig::adamw()
    };
    let (tuned, hist) = finetune(&pruned, &data, &cfg).unwrap();
    assert_eq!(hist.len(), 2);
    assert_eq!(tuned.param_count(), stats.params_after);
    let shapes = |m: &Model| m.params().iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>();
    assert_eq!(shapes(&tuned), shapes(&pruned));
}

#[test]
fn equal_seeds_train_identically() {
    let data = gen_synthetic(7, 8).unwrap();
    let run = || {
        let m = common::small_vgg(7);
        let cfg = TrainConfig {
            epochs: 2,
            seed: 7,
            ..TrainConfig::adamw()
        };
        train(&m, &data, &cfg).unwrap()
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha.last().unwrap().loss.to_bits(), hb.last().unwrap().loss.to_bits());
}
