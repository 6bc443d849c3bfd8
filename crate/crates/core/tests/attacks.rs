mod common;

use common::{client, random_dataset, rng};
use pflsim::attack::{
    backdoor_loss_and_grad, clean_gradients, grad_alignment, optimize_trigger_grad_align, optimize_trigger_loss_align,
    Adversary, AttackConfig, AttackKind,
};
use pflsim::data::TriggerSpec;
use pflsim::fl::{ClientState, Role};
use pflsim::model::{init_model, l2_norm, FlatParams, MlpConfig};
use pflsim::strategy::{LocalResult, LocalTrainConfig, RoundContext, StrategyKind};
use rand::Rng;

const DIM: usize = 4;
const CLASSES: usize = 3;

fn model() -> MlpConfig {
    MlpConfig::new(DIM, vec![6], CLASSES).unwrap()
}

fn malicious_client() -> ClientState {
    let mut r = rng(3);
    let train = random_dataset(&mut r, 12, DIM, CLASSES);
    let source = random_dataset(&mut r, 4, DIM, CLASSES);
    client(0, Role::Malicious, train, source, 77)
}

fn update(cfg: AttackConfig, epochs: usize, radius: Option<f64>) -> (Adversary, LocalResult, FlatParams) {
    let m = model();
    let global = init_model(&m, 1).unwrap();
    let mut c = malicious_client();
    let mut adv = Adversary::new(cfg, std::slice::from_ref(&c), DIM, CLASSES).unwrap();
    adv.prepare_round(1, &global, &m, true).unwrap();
    let ctx = RoundContext {
        round: 1,
        model: &m,
        local: LocalTrainConfig { epochs, lr: 0.1, batch_size: 4 },
        server_control: None,
    };
    let out = adv.client_update(&global, &mut c, &StrategyKind::FedAvgFt, &ctx, radius).unwrap();
    (adv, out, global)
}

fn kind(kind: AttackKind) -> AttackConfig {
    AttackConfig { kind, mask: vec![0, 1], ..Default::default() }
}

#[test]
fn loss_align_reaches_grid_minimum_on_linear_model() {
    let m = MlpConfig::new(2, vec![], 3).unwrap();
    for seed in 0..3 {
        let params = init_model(&m, seed).unwrap();
        let clean = random_dataset(&mut rng(seed), 6, 2, 3);
        let t = TriggerSpec::uniform(2, &[0, 1], 0.5, 2).unwrap();
        let out = optimize_trigger_loss_align(&t, &params, &m, &clean, 200, 0.1).unwrap();
        let mut best = f64::INFINITY;
        for i in 0..=100 {
            for j in 0..=100 {
                let d = [i as f64 / 100.0, j as f64 / 100.0];
                let l = backdoor_loss_and_grad(&params, &m, &clean, &d, &[true, true], 2).unwrap().0;
                best = best.min(l);
            }
        }
        assert!(out.objective_after <= best + 1e-3, "seed {seed}: {} vs grid {best}", out.objective_after);
    }
}

#[test]
fn grad_align_decreases_objective_on_every_seed() {
    let m = MlpConfig::new(2, vec![4], CLASSES).unwrap();
    for seed in 0..10 {
        let params = init_model(&m, seed).unwrap();
        let clean = random_dataset(&mut rng(seed + 100), 4, 2, CLASSES);
        let t = TriggerSpec::uniform(2, &[0, 1], 0.5, 0).unwrap();
        let out = optimize_trigger_grad_align(&t, &params, &m, &clean, 100, 0.1, 1e-4).unwrap();
        let grads = clean_gradients(&params, &m, &clean).unwrap();
        let before = grad_alignment(&params, &m, &clean, &grads, t.delta(), t.mask(), 0).unwrap();
        let after = grad_alignment(&params, &m, &clean, &grads, out.trigger.delta(), t.mask(), 0).unwrap();
        assert!((before - out.objective_before).abs() < 1e-12);
        assert!((after - out.objective_after).abs() < 1e-12);
        assert!(out.accepted_steps > 0 && after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn grad_align_halves_objective_on_single_examples() {
    let m = MlpConfig::new(2, vec![4], CLASSES).unwrap();
    let mut halved = 0;
    for seed in 0..10 {
        let params = init_model(&m, seed).unwrap();
        let clean = random_dataset(&mut rng(seed + 100), 1, 2, CLASSES);
        let t = TriggerSpec::uniform(2, &[0, 1], 0.5, 0).unwrap();
        let out = optimize_trigger_grad_align(&t, &params, &m, &clean, 100, 0.1, 1e-4).unwrap();
        if out.objective_after <= 0.5 * out.objective_before {
            halved += 1;
        }
    }
    assert!(halved >= 9, "objective halved in {halved}/10 seeds");
}

#[test]
fn model_replacement_with_unit_scale_is_sybil() {
    let (_, a, _) = update(kind(AttackKind::Sybil), 2, None);
    let (_, b, _) = update(AttackConfig { scale_factor: 1.0, ..kind(AttackKind::ModelRe) }, 2, None);
    assert_eq!(a.update, b.update);
}

#[test]
fn model_replacement_scales_the_norm() {
    let (_, a, _) = update(kind(AttackKind::Sybil), 2, None);
    let (_, b, _) = update(kind(AttackKind::ModelRe), 2, None);
    let ratio = l2_norm(&b.update.delta) / l2_norm(&a.update.delta);
    assert!((ratio - 20.0).abs() < 1e-9);
}

#[test]
fn pgd_with_zero_radius_submits_nothing() {
    let (_, out, _) = update(kind(AttackKind::Pgd), 2, Some(0.0));
    assert!(out.update.delta.iter().all(|v| *v == 0.0));
    let (_, out, global) = update(AttackConfig { pgd_radius: Some(0.05), ..kind(AttackKind::Pgd) }, 3, None);
    assert!(out.trained.distance(&global) <= 0.05 + 1e-12);
}

#[test]
fn pgd_without_radius_is_an_error() {
    let m = model();
    let global = init_model(&m, 1).unwrap();
    let mut c = malicious_client();
    let adv = Adversary::new(kind(AttackKind::Pgd), std::slice::from_ref(&c), DIM, CLASSES).unwrap();
    let ctx = RoundContext { round: 1, model: &m, local: LocalTrainConfig { epochs: 1, lr: 0.1, batch_size: 4 }, server_control: None };
    assert!(adv.client_update(&global, &mut c, &StrategyKind::FedAvgFt, &ctx, None).is_err());
}

#[test]
fn neurotoxin_with_vanishing_ratio_is_sybil() {
    let (_, a, _) = update(kind(AttackKind::Sybil), 2, None);
    let (_, b, _) = update(AttackConfig { neurotoxin_ratio: 0.0, ..kind(AttackKind::Neurotoxin) }, 2, None);
    assert_eq!(a.update, b.update);
}

#[test]
fn neurotoxin_freezes_the_previous_global_top_coordinates() {
    let m = model();
    let g0 = init_model(&m, 1).unwrap();
    let mut r = rng(5);
    let g1 = FlatParams::new(g0.values().iter().map(|v| v + r.random_range(-0.1..0.1)).collect());
    let mut c = malicious_client();
    let cfg = AttackConfig { neurotoxin_ratio: 0.2, ..kind(AttackKind::Neurotoxin) };
    let mut adv = Adversary::new(cfg, std::slice::from_ref(&c), DIM, CLASSES).unwrap();
    adv.prepare_round(1, &g0, &m, false).unwrap();
    adv.prepare_round(2, &g1, &m, true).unwrap();
    let frozen = adv.state().frozen.clone().unwrap();
    assert_eq!(frozen.iter().filter(|f| **f).count(), (0.2 * g0.len() as f64).floor() as usize);
    let ctx = RoundContext { round: 2, model: &m, local: LocalTrainConfig { epochs: 2, lr: 0.1, batch_size: 4 }, server_control: None };
    let out = adv.client_update(&g1, &mut c, &StrategyKind::FedAvgFt, &ctx, None).unwrap();
    for (i, f) in frozen.iter().enumerate() {
        if *f {
            assert_eq!(out.update.delta[i], 0.0);
        }
    }
}

#[test]
fn pfedba_with_zero_epochs_still_optimizes_the_trigger() {
    let cfg = AttackConfig { loss_align_steps: 10, grad_align_steps: 3, ..kind(AttackKind::Pfedba) };
    let (adv, out, _) = update(cfg.clone(), 0, None);
    assert!(out.update.delta.iter().all(|v| *v == 0.0));
    assert_ne!(adv.trigger().delta(), cfg.initial_trigger(DIM).unwrap().delta());
    assert_eq!(adv.state().diagnostics.len(), 1);
}

#[test]
fn pfedba_without_alignment_is_sybil() {
    let (_, a, _) = update(kind(AttackKind::Sybil), 2, None);
    let cfg = AttackConfig { loss_align_steps: 0, grad_align_steps: 0, ..kind(AttackKind::Pfedba) };
    let (adv, b, _) = update(cfg, 2, None);
    assert_eq!(a.update, b.update);
    assert_eq!(adv.trigger().delta(), kind(AttackKind::Sybil).initial_trigger(DIM).unwrap().delta());
}

#[test]
fn unselected_rounds_leave_the_adversary_untouched() {
    let m = model();
    let global = init_model(&m, 1).unwrap();
    let c = malicious_client();
    let cfg = AttackConfig { loss_align_steps: 10, grad_align_steps: 3, ..kind(AttackKind::Pfedba) };
    let mut adv = Adversary::new(cfg.clone(), std::slice::from_ref(&c), DIM, CLASSES).unwrap();
    adv.prepare_round(1, &global, &m, false).unwrap();
    assert!(adv.state().diagnostics.is_empty());
    assert!(!adv.state().initialized);
    assert_eq!(adv.trigger(), &cfg.initial_trigger(DIM).unwrap());
}

#[test]
fn attack_waits_for_its_start_round() {
    let m = model();
    let global = init_model(&m, 1).unwrap();
    let mut c = malicious_client();
    let cfg = AttackConfig { start_round: 3, ..kind(AttackKind::ModelRe) };
    let adv = Adversary::new(cfg, std::slice::from_ref(&c), DIM, CLASSES).unwrap();
    assert!(!adv.active(2) && adv.active(3));
    let ctx = RoundContext { round: 2, model: &m, local: LocalTrainConfig { epochs: 1, lr: 0.1, batch_size: 4 }, server_control: None };
    let out = adv.client_update(&global, &mut c.clone(), &StrategyKind::FedAvgFt, &ctx, None).unwrap();
    let clean = c.all_clean();
    let honest = StrategyKind::FedAvgFt.local_step_on(&global, &mut c, &ctx, &clean, &Default::default()).unwrap();
    assert_eq!(out.update, honest.update);
}
