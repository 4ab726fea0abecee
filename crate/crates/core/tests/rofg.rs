mod common;

use common::{model, random_images, random_labels, tiny_images};
use std::cell::RefCell;
use std::rc::Rc;

use proptest::prelude::*;
use rofg_core::attacks::{pgd_attack, AdvBatch, AttackConfig};
use rofg_core::augment::MixAugment;
use rofg_core::models::ModelSpec;
use rofg_core::rofg::{
    ablation_hook, rofg_as_hook, rofg_da_hook, split_small_loss, verification_hook, AblationHook, AblationMode,
    AblationVariant, RofgAsConfig, RofgAsHook, RofgDaConfig, RofgDaHook, VerificationConfig, VerificationMode,
};
use rofg_core::trainers::{train_epoch_at, BatchContext, BatchHook, BatchStats, OptimizerState, TrainConfig};
use rofg_core::{DenseArray, Rng};

fn fixture(seed: u64, n: usize) -> (ModelSpec, rofg_core::models::ModelParams, AdvBatch) {
    let spec = ModelSpec::small_cnn(1, 8, &[8], 3);
    let params = model(&spec, seed);
    let mut rng = Rng::new(seed);
    let x = random_images(n, 1, 8, &mut rng);
    let y = random_labels(n, 3, &mut rng);
    let adv = pgd_attack(&spec, &params, &x, &y, &AttackConfig::standard(), &mut rng).unwrap();
    (spec, params, adv)
}

fn with_losses(adv: &AdvBatch, losses: &[f32]) -> AdvBatch {
    AdvBatch {
        loss_per_example: losses.to_vec(),
        ..adv.clone()
    }
}

#[test]
fn split_examples() {
    let (_, _, adv) = fixture(1, 3);
    let adv = with_losses(&adv, &[0.5, 1.7, 3.0]);
    assert_eq!(split_small_loss(&adv, 1.7).small, vec![0, 1]);
    assert!(split_small_loss(&adv, -1.0).small.is_empty());
    assert_eq!(split_small_loss(&adv, f32::INFINITY).small, vec![0, 1, 2]);
}

#[test]
fn baseline_ablation_is_identity() {
    let (spec, params, adv) = fixture(2, 6);
    let mode = AblationMode {
        variant: AblationVariant::Baseline,
        trigger_epoch: 0,
        one_shot: false,
    };
    let mut stats = BatchStats::default();
    for epoch in 0..3 {
        let out = ablation_hook(&mode, epoch, adv.clone(), f32::INFINITY, &spec, &params, &mut stats).unwrap();
        assert_eq!(out, adv);
    }
}

#[test]
fn perturbation_only_swaps_in_naturals() {
    let (spec, params, adv) = fixture(3, 3);
    let adv = with_losses(&adv, &[0.1, 0.2, 9.0]);
    let mode = AblationMode {
        variant: AblationVariant::PerturbationOnly,
        trigger_epoch: 0,
        one_shot: false,
    };
    let mut stats = BatchStats::default();
    let out = ablation_hook(&mode, 0, adv.clone(), 1.0, &spec, &params, &mut stats).unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(out.x_adv.row(0), adv.x.row(0));
    assert_eq!(out.x_adv.row(1), adv.x.row(1));
    assert_eq!(out.x_adv.row(2), adv.x_adv.row(2));
    assert!(out.check_feasible(|_| 8.0 / 255.0).is_ok());
    assert_eq!(stats.replaced, 2);
}

#[test]
fn full_removal_skips_update() {
    let (train, _) = tiny_images(64, 8, 8, 1);
    let spec = ModelSpec::small_cnn(1, 8, &[8], 4);
    let params = model(&spec, 1);
    let mut p = params.clone();
    let mut st = OptimizerState::new(&p);
    let cfg = TrainConfig {
        batch_size: 16,
        ..TrainConfig::desk()
    };
    let mode = AblationMode {
        variant: AblationVariant::DataAndPerturbation,
        trigger_epoch: 0,
        one_shot: false,
    };
    let mut hooks: Vec<Box<dyn BatchHook>> = vec![Box::new(AblationHook::new(mode, f32::INFINITY))];
    let stats = train_epoch_at(&spec, &mut p, &mut st, &train, &cfg, &AttackConfig::standard(), 0, &Rng::new(1), &mut hooks)
        .unwrap();
    assert_eq!(stats.skipped_batches, stats.batches);
    assert_eq!(stats.dropped_rows, 64);
    assert_eq!(p, params);
}

/// Records every batch handed to the update after the other hooks ran.
struct Spy(Rc<RefCell<Vec<AdvBatch>>>);
impl BatchHook for Spy {
    fn after_attack(&mut self, _: &BatchContext<'_>, adv: AdvBatch, _: &mut BatchStats) -> rofg_core::Result<AdvBatch> {
        self.0.borrow_mut().push(adv.clone());
        Ok(adv)
    }
}

#[test]
fn data_and_perturbation_leaves_no_small_loss_rows() {
    let (train, _) = tiny_images(128, 8, 8, 5);
    let spec = ModelSpec::small_cnn(1, 8, &[8], 4);
    let mut p = model(&spec, 2);
    let mut st = OptimizerState::new(&p);
    let cfg = TrainConfig {
        batch_size: 32,
        ..TrainConfig::desk()
    };
    let t = 1.3;
    let mode = AblationMode {
        variant: AblationVariant::DataAndPerturbation,
        trigger_epoch: 1,
        one_shot: false,
    };
    let seen = Rc::new(RefCell::new(Vec::new()));
    let mut hooks: Vec<Box<dyn BatchHook>> = vec![Box::new(AblationHook::new(mode, t)), Box::new(Spy(seen.clone()))];
    for e in 0..3 {
        train_epoch_at(&spec, &mut p, &mut st, &train, &cfg, &AttackConfig::standard(), e, &Rng::new(3), &mut hooks).unwrap();
    }
    let seen = seen.borrow();
    assert_eq!(seen.len(), 12);
    assert!(seen[4..].iter().all(|b| b.loss_per_example.iter().all(|&l| l > t)));
    assert!(seen[..4].iter().map(|b| b.len()).sum::<usize>() == 128);
}

#[test]
fn adjusted_attack_touches_nothing_above_threshold() {
    let (spec, params, adv) = fixture(4, 8);
    let cfg = RofgAsConfig::scaled(-1.0, 16.0 / 255.0, &AttackConfig::standard());
    let mut rng = Rng::new(9);
    let before = rng.clone();
    let (out, replaced) = rofg_as_hook(&cfg, &spec, &params, adv.clone(), &mut rng).unwrap();
    assert_eq!(out, adv);
    assert_eq!(replaced, 0);
    assert_eq!(rng.next_u64(), before.clone().next_u64());
}

#[test]
fn adjusted_attack_budgets_per_row() {
    let (spec, params, adv) = fixture(5, 12);
    let mut losses = adv.loss_per_example.clone();
    losses.sort_by(f32::total_cmp);
    let t = losses[6];
    let cfg = RofgAsConfig::scaled(t, 14.0 / 255.0, &AttackConfig::standard());
    assert_eq!(cfg.steps_a, 18);
    let split = split_small_loss(&adv, t);
    let (out, replaced) = rofg_as_hook(&cfg, &spec, &params, adv.clone(), &mut Rng::new(1)).unwrap();
    assert_eq!(replaced, split.small.len());
    for i in 0..out.len() {
        let budget = if split.small.contains(&i) { 14.0 / 255.0 } else { 8.0 / 255.0 };
        assert!(out.select(&[i]).check_feasible(|_| budget).is_ok());
        if !split.small.contains(&i) {
            assert_eq!(out.x_adv.row(i), adv.x_adv.row(i));
        }
    }
}

#[test]
fn full_proportion_never_augments() {
    let (spec, params, adv) = fixture(6, 8);
    let cfg = RofgDaConfig::new(f32::INFINITY, 1.0);
    let (out, report) =
        rofg_da_hook(&cfg, &spec, &params, adv.clone(), &AttackConfig::standard(), &MixAugment, &mut Rng::new(2)).unwrap();
    assert_eq!(out, adv);
    assert_eq!(report.rounds, 0);
}

#[test]
fn augmentation_rounds_shrink_small_set() {
    let (spec, params, adv) = fixture(7, 16);
    let mut losses = adv.loss_per_example.clone();
    losses.sort_by(f32::total_cmp);
    let cfg = RofgDaConfig {
        max_rounds: 8,
        ..RofgDaConfig::new(losses[12], 0.1)
    };
    let (out, report) =
        rofg_da_hook(&cfg, &spec, &params, adv, &AttackConfig::standard(), &MixAugment, &mut Rng::new(3)).unwrap();
    assert!(report.rounds >= 1);
    assert!(report.small_counts.windows(2).all(|w| w[1] <= w[0]), "{:?}", report.small_counts);
    assert!(out.check_feasible(|_| 8.0 / 255.0).is_ok());
    let frac = *report.small_counts.last().unwrap() as f32 / 16.0;
    assert_eq!(report.saturated, frac > 0.1);
}

#[test]
fn verification_window_gating() {
    let (spec, params, adv) = fixture(8, 4);
    let cfg = VerificationConfig::new(VerificationMode::Fixed { eps_add: 4.0 / 255.0 }, 5, 9);
    for epoch in [0, 4, 10, 40] {
        let out = verification_hook(&cfg, &spec, &params, adv.x.clone(), &adv.y, epoch).unwrap();
        assert_eq!(out, adv.x);
    }
    let inside = verification_hook(&cfg, &spec, &params, adv.x.clone(), &adv.y, 7).unwrap();
    assert_ne!(inside, adv.x);
    assert!(inside.linf_distance(&adv.x).unwrap() <= 4.0 / 255.0 + f32::EPSILON);
    let zero = VerificationConfig::new(VerificationMode::Fixed { eps_add: 0.0 }, 0, 9);
    assert_eq!(verification_hook(&zero, &spec, &params, adv.x.clone(), &adv.y, 3).unwrap(), adv.x);
}

#[test]
fn linear_verification_budget() {
    let cfg = VerificationConfig::new(VerificationMode::Linear { eps_max: 8.0 / 255.0 }, 50, 100);
    assert_eq!(cfg.budget(50), Some(0.0));
    assert!((cfg.budget(75).unwrap() - 4.0 / 255.0).abs() < 1e-7);
    assert_eq!(cfg.budget(101), None);
}

fn at_run(hooks: &mut [Box<dyn BatchHook>]) -> (rofg_core::models::ModelParams, Vec<f32>) {
    let (train, _) = tiny_images(96, 8, 8, 7);
    let spec = ModelSpec::small_cnn(1, 8, &[8], 4);
    let mut p = model(&spec, 3);
    let mut st = OptimizerState::new(&p);
    let cfg = TrainConfig {
        batch_size: 32,
        ..TrainConfig::desk()
    };
    let mut losses = Vec::new();
    for e in 0..2 {
        let s = train_epoch_at(&spec, &mut p, &mut st, &train, &cfg, &AttackConfig::standard(), e, &Rng::new(8), hooks).unwrap();
        losses.extend(s.adv_losses);
    }
    (p, losses)
}

#[test]
fn disabled_mitigations_match_plain_training() {
    let plain = at_run(&mut []);
    let cfg = RofgAsConfig::scaled(f32::NEG_INFINITY, 16.0 / 255.0, &AttackConfig::standard());
    assert_eq!(at_run(&mut [Box::new(RofgAsHook(cfg))]), plain);
    let da = RofgDaHook {
        cfg: RofgDaConfig::new(1.7, 1.0),
        augmenter: MixAugment,
    };
    assert_eq!(at_run(&mut [Box::new(da)]), plain);
    let late = RofgAsConfig {
        start_epoch: 2,
        ..RofgAsConfig::scaled(f32::INFINITY, 16.0 / 255.0, &AttackConfig::standard())
    };
    assert_eq!(at_run(&mut [Box::new(RofgAsHook(late))]), plain);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_partitions_batch(losses in prop::collection::vec(0.0f32..5.0, 1..20), t in -1.0f32..6.0) {
        let n = losses.len();
        let x = DenseArray::zeros(&[n, 1]);
        let adv = AdvBatch { x: x.clone(), x_adv: x, y: vec![0; n], loss_per_example: losses.clone(), ids: (0..n).collect() };
        let s = split_small_loss(&adv, t);
        let mut all: Vec<usize> = s.small.iter().chain(&s.rest).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(s.small.iter().all(|&i| losses[i] <= t));
        prop_assert!(s.rest.iter().all(|&i| losses[i] > t));
    }

    #[test]
    fn adjusted_attack_feasibility(seed in any::<u64>(), q in 0.0f32..1.0, eps_a in 0.0f32..0.2) {
        let (spec, params, adv) = fixture(seed, 6);
        let mut sorted = adv.loss_per_example.clone();
        sorted.sort_by(f32::total_cmp);
        let t = sorted[((q * 5.0) as usize).min(5)];
        let cfg = RofgAsConfig::scaled(t, eps_a, &AttackConfig::standard());
        let split = split_small_loss(&adv, t);
        let (out, _) = rofg_as_hook(&cfg, &spec, &params, adv, &mut Rng::new(seed)).unwrap();
        let small = split.small;
        let feasible = out.check_feasible(|i| if small.contains(&i) { eps_a } else { 8.0 / 255.0 });
        prop_assert!(feasible.is_ok());
    }
}
