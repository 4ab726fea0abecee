mod common;

use common::{blobs, model, random_images, random_labels, tiny_images};
use proptest::prelude::*;
use rofg_core::attacks::AttackConfig;
use rofg_core::harness::evaluate;
use rofg_core::models::{accuracy, predict, ModelParams, ModelSpec};
use rofg_core::trainers::{
    ce_gradients, sgd_step, trades_gradients, train_epoch_at, train_epoch_natural, train_epoch_trades, BatchHook,
    OptimizerState, TradesConfig, TrainConfig,
};
use rofg_core::{DenseArray, Rng};

struct Identity;
impl BatchHook for Identity {}

fn small_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        lr_milestones: vec![],
        ..TrainConfig::desk()
    }
}

#[test]
fn natural_training_separates_blobs() {
    let (train, _) = blobs(400, 10, 2, 0.05, 1);
    let spec = ModelSpec::mlp(&[2, 8, 2]);
    let mut params = model(&spec, 3);
    let mut state = OptimizerState::new(&params);
    let cfg = small_cfg(30);
    let root = Rng::new(7);
    for e in 0..cfg.epochs {
        train_epoch_natural(&spec, &mut params, &mut state, &train, &cfg, e, &root, &mut []).unwrap();
    }
    let rows: Vec<usize> = (0..train.len()).collect();
    let (x, y) = train.batch(&rows);
    let acc = accuracy(&predict(&spec, &params, &x).unwrap(), &y).unwrap();
    assert!(acc > 0.99, "train accuracy {acc}");
}

#[test]
fn noiseless_blobs_reach_perfect_test_accuracy() {
    let (train, test) = blobs(300, 300, 3, 0.0, 2);
    let spec = ModelSpec::mlp(&[2, 16, 3]);
    let mut params = model(&spec, 1);
    let mut state = OptimizerState::new(&params);
    let cfg = small_cfg(40);
    let root = Rng::new(1);
    for e in 0..cfg.epochs {
        train_epoch_natural(&spec, &mut params, &mut state, &train, &cfg, e, &root, &mut []).unwrap();
    }
    let rows: Vec<usize> = (0..test.len()).collect();
    let (x, y) = test.batch(&rows);
    assert_eq!(accuracy(&predict(&spec, &params, &x).unwrap(), &y).unwrap(), 1.0);
}

fn run_at(seed: u64, epochs: usize, hooks: &mut [Box<dyn BatchHook>]) -> (ModelParams, Vec<f64>) {
    let (train, _) = tiny_images(128, 8, 8, 4);
    let spec = ModelSpec::small_cnn(1, 8, &[8], 4);
    let mut params = model(&spec, seed);
    let mut state = OptimizerState::new(&params);
    let root = Rng::new(seed);
    let mut accs = Vec::new();
    for e in 0..epochs {
        let s = train_epoch_at(&spec, &mut params, &mut state, &train, &small_cfg(epochs), &AttackConfig::standard(), e, &root, hooks)
            .unwrap();
        accs.push(s.train_rob_acc);
    }
    (params, accs)
}

#[test]
fn zero_epochs_leave_params_untouched() {
    let spec = ModelSpec::small_cnn(1, 8, &[8], 4);
    assert_eq!(run_at(5, 0, &mut []).0, model(&spec, 5));
}

#[test]
fn same_seed_same_params() {
    assert_eq!(run_at(9, 2, &mut []), run_at(9, 2, &mut []));
    assert_ne!(run_at(9, 2, &mut []).0, run_at(10, 2, &mut []).0);
}

#[test]
fn identity_hooks_are_invisible() {
    let mut hooks: Vec<Box<dyn BatchHook>> = vec![Box::new(Identity), Box::new(Identity)];
    assert_eq!(run_at(3, 2, &mut hooks), run_at(3, 2, &mut []));
}

#[test]
fn zero_budget_at_equals_natural_training() {
    let (train, _) = tiny_images(96, 8, 8, 6);
    let spec = ModelSpec::small_cnn(1, 8, &[8], 4);
    let cfg = small_cfg(2);
    let root = Rng::new(2);
    let zero = AttackConfig {
        eps: 0.0,
        ..AttackConfig::standard()
    };
    let (mut pa, mut pn) = (model(&spec, 1), model(&spec, 1));
    let (mut sa, mut sn) = (OptimizerState::new(&pa), OptimizerState::new(&pn));
    for e in 0..2 {
        let a = train_epoch_at(&spec, &mut pa, &mut sa, &train, &cfg, &zero, e, &root, &mut []).unwrap();
        let n = train_epoch_natural(&spec, &mut pn, &mut sn, &train, &cfg, e, &root, &mut []).unwrap();
        assert_eq!(a.train_nat_acc, n.train_nat_acc);
        assert_eq!(a.adv_losses, n.adv_losses);
    }
    assert_eq!(pa, pn);
}

#[test]
fn trades_without_tradeoff_is_cross_entropy() {
    let spec = ModelSpec::small_cnn(1, 8, &[8], 3);
    let params = model(&spec, 2);
    let mut rng = Rng::new(3);
    let x = random_images(8, 1, 8, &mut rng);
    let x_adv = x.map(|v| (v + 0.03).min(1.0));
    let y = random_labels(8, 3, &mut rng);
    let (total, ce, g) = trades_gradients(&spec, &params, &x, &x_adv, &y, 0.0).unwrap();
    let (loss, g_ce, _) = ce_gradients(&spec, &params, &x, &y).unwrap();
    assert_eq!(total, ce);
    assert!((ce - loss).abs() <= 1e-6);
    for (a, b) in g.arrays().zip(g_ce.arrays()) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-6);
        }
    }
}

#[test]
fn trades_epoch_runs_and_is_deterministic() {
    let (train, _) = tiny_images(96, 8, 8, 1);
    let spec = ModelSpec::small_cnn(1, 8, &[8], 4);
    let run = || {
        let mut p = model(&spec, 4);
        let mut s = OptimizerState::new(&p);
        let st = train_epoch_trades(
            &spec,
            &mut p,
            &mut s,
            &train,
            &small_cfg(1),
            &AttackConfig::standard(),
            &TradesConfig::default(),
            0,
            &Rng::new(4),
            &mut [],
        )
        .unwrap();
        (p, st.train_loss)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.1.is_finite());
}

#[test]
fn robust_accuracy_never_exceeds_natural() {
    let (train, test) = tiny_images(256, 300, 8, 2);
    let spec = ModelSpec::small_cnn(1, 8, &[16], 4);
    let mut params = model(&spec, 2);
    let mut state = OptimizerState::new(&params);
    let root = Rng::new(2);
    for e in 0..3 {
        train_epoch_at(&spec, &mut params, &mut state, &train, &small_cfg(3), &AttackConfig::standard(), e, &root, &mut []).unwrap();
    }
    let r = evaluate(&spec, &params, &test, &AttackConfig::pgd20(), &Rng::new(5), 1).unwrap();
    assert!(r.rob_acc <= r.nat_acc, "{r:?}");
    assert!(r.nat_acc > 0.5, "{r:?}");
}

proptest! {
    #[test]
    fn weight_decay_contracts_geometrically(
        values in prop::collection::vec(-3.0f32..3.0, 1..8),
        lr in 0.001f32..0.5,
        wd in 0.0f32..0.01,
        steps in 1usize..20,
    ) {
        let cfg = TrainConfig { momentum: 0.0, weight_decay: wd, ..TrainConfig::desk() };
        let n = values.len();
        let mut p = ModelParams::from_entries(vec![("w".into(), DenseArray::new(vec![n], values.clone()).unwrap())]);
        let zero = ModelParams::from_entries(vec![("w".into(), DenseArray::zeros(&[n]))]);
        let mut st = OptimizerState::new(&p);
        for _ in 0..steps {
            let before = p.get("w").unwrap().clone();
            sgd_step(&mut p, &zero, &mut st, lr, &cfg).unwrap();
            for (a, b) in p.get("w").unwrap().data().iter().zip(before.data()) {
                prop_assert_eq!(*a, b - lr * (wd * b));
            }
        }
        let factor = (1.0 - lr as f64 * wd as f64).powi(steps as i32);
        for (a, b) in p.get("w").unwrap().data().iter().zip(&values) {
            prop_assert!((*a as f64 - *b as f64 * factor).abs() <= 1e-5 * b.abs().max(1.0) as f64);
        }
    }
}
