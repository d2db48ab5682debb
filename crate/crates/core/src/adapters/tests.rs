use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corruption::{corrupt, CorruptionKind, CorruptionSpec};
use crate::dataset::Dataset;
use crate::models::{entropy_of, train_backbone, BackboneConfig, ParamScope, TrainHyper, ViewPlan};
use crate::prompts::{apply_cvp, frame_mask, init_cvp, lvp_init};

const SIDE: usize = 16;

/// Two classes told apart by which half of the image is bright.
fn halves(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut data = Vec::with_capacity(n * 3 * SIDE * SIDE);
    for &l in &labels {
        for _ in 0..3 {
            for _y in 0..SIDE {
                for x in 0..SIDE {
                    let bright = (x < SIDE / 2) == (l == 0);
                    let base = if bright { 0.7 } else { 0.3 };
                    data.push((base + rng.random_range(-0.15..0.15f32)).clamp(0.0, 1.0));
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 3, SIDE, SIDE], data).unwrap(), labels, 2).unwrap()
}

fn small_config() -> BackboneConfig {
    BackboneConfig {
        widths: vec![8, 16],
        pool_after: vec![0, 1],
        num_classes: 2,
        ..Default::default()
    }
}

fn trained() -> &'static Backbone {
    static MODEL: OnceLock<Backbone> = OnceLock::new();
    MODEL.get_or_init(|| {
        let hyper = TrainHyper {
            steps: 150,
            batch_size: 32,
            augment: None,
            ..Default::default()
        };
        train_backbone(small_config(), &halves(256, 1), None, &hyper).unwrap().backbone
    })
}

fn head() -> &'static SslHead {
    static HEAD: OnceLock<SslHead> = OnceLock::new();
    HEAD.get_or_init(|| SslHead::new(small_config().feature_dim(), 3))
}

fn heads() -> Heads<'static> {
    Heads {
        ssl: Some(head()),
        rotation: None,
    }
}

fn batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let d = halves(n, 100 + seed);
    let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 3, seed).unwrap();
    (corrupt(&d.images, &spec).unwrap(), d.labels)
}

fn cfg(iters: usize) -> AdaptConfig {
    AdaptConfig {
        iters,
        augment: AugmentConfig::disabled(),
        ..Default::default()
    }
}

fn contrastive<'a>(x: &Tensor, c: &AdaptConfig) -> Objective<'a> {
    objective(c, heads(), x, None).unwrap()
}

#[test]
fn cvp_zero_iterations_is_the_initial_prompt() {
    let (x, _) = batch(8, 1);
    let c = cfg(0);
    let out = adapt_cvp(&x, trained(), &contrastive(&x, &c), BnMode::Eval, &c).unwrap();
    let init = init_cvp(c.cvp.init, c.cvp.kernel_size, c.cvp.lambda_range, c.seed).unwrap();
    assert!(out.adapted.bit_eq(&apply_cvp(&x, &init).unwrap().clamp(0.0, 1.0)));
    assert_eq!(out.loss_trace.len(), 1);
    assert_eq!(out.final_loss, out.loss_trace[0]);
    assert!(!out.fallback);
}

#[test]
fn cvp_trace_has_one_entry_per_iteration() {
    let (x, _) = batch(8, 2);
    for t in [1, 3, 5] {
        let c = cfg(t);
        let out = adapt_cvp(&x, trained(), &contrastive(&x, &c), BnMode::Eval, &c).unwrap();
        assert_eq!(out.loss_trace.len(), t + 1);
        assert!(out.final_loss <= out.initial_loss());
    }
}

#[test]
fn oversized_step_falls_back_to_the_initial_kernel() {
    let (x, labels) = batch(8, 3);
    let mut c = cfg(3);
    c.ssl_task = SslTask::Supervised;
    c.cvp.kernel_step = 50.0;
    c.cvp.lambda_step = 50.0;
    let obj = objective(&c, heads(), &x, Some(&labels)).unwrap();
    let out = adapt_cvp(&x, trained(), &obj, BnMode::Eval, &c).unwrap();
    assert!(*out.loss_trace.last().unwrap() > out.initial_loss(), "{:?}", out.loss_trace);
    assert!(out.fallback);
    assert_eq!(out.final_loss, out.initial_loss());
    let zero = adapt_cvp(&x, trained(), &obj, BnMode::Eval, &cfg(0)).unwrap();
    assert!(out.adapted.bit_eq(&zero.adapted));
    assert_eq!(out.predictions, zero.predictions);
}

#[test]
fn non_finite_loss_reverts_even_without_fallback() {
    let (x, _) = batch(8, 4);
    let mut c = cfg(3);
    c.fallback = false;
    c.cvp.kernel_step = f32::INFINITY;
    let out = adapt_cvp(&x, trained(), &contrastive(&x, &c), BnMode::Eval, &c).unwrap();
    assert!(out.fallback, "{:?} {:?}", out.loss_trace, out.prompt);
    assert_eq!(out.loss_trace.len(), 4);
    assert!(out.loss_trace[1].is_nan());
    assert_eq!(out.final_loss, out.initial_loss());
    assert!(out.adapted.is_finite());
}

#[test]
fn prompt_adapters_reject_unfrozen_models() {
    let (x, _) = batch(4, 5);
    let mut b = trained().clone();
    b.frozen = false;
    let c = cfg(1);
    let obj = contrastive(&x, &c);
    for r in [
        adapt_cvp(&x, &b, &obj, BnMode::Eval, &c),
        adapt_additive_vp(&x, &b, &obj, &c, VpVariant::Patch),
        adapt_lvp(&x, &b, &obj, &c),
    ] {
        assert!(matches!(r, Err(Error::NotFrozen(_))));
    }
}

#[test]
fn every_prompt_adapter_reports_no_loss_increase() {
    for seed in 0..4 {
        let (x, _) = batch(8, 10 + seed);
        let mut c = cfg(3);
        c.seed = seed;
        c.augment = AugmentConfig::default();
        let obj = contrastive(&x, &c);
        let before = trained().clone();
        let outs = [
            adapt_cvp(&x, trained(), &obj, BnMode::Eval, &c).unwrap(),
            adapt_additive_vp(&x, trained(), &obj, &c, VpVariant::Patch).unwrap(),
            adapt_additive_vp(&x, trained(), &obj, &c, VpVariant::Padding).unwrap(),
            adapt_lvp(&x, trained(), &obj, &c).unwrap(),
        ];
        for o in &outs {
            assert!(o.final_loss <= o.initial_loss(), "{:?}", o.loss_trace);
            assert!(o.adapted.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(o.changed_tensors.is_empty());
        }
        assert!(trained().bit_eq(&before));
    }
}

#[test]
fn zero_epsilon_vp_is_identity() {
    let (x, _) = batch(8, 6);
    let mut c = cfg(3);
    c.vp.epsilon = 0.0;
    let out = adapt_additive_vp(&x, trained(), &contrastive(&x, &c), &c, VpVariant::Patch).unwrap();
    assert!(out.adapted.bit_eq(&x));
    assert_eq!(out.predictions, trained().predict(&x).unwrap().1);
}

#[test]
fn vp_stays_inside_the_epsilon_ball() {
    let (x, _) = batch(8, 7);
    let mut c = cfg(12);
    c.fallback = false;
    for variant in [VpVariant::Patch, VpVariant::Padding] {
        let out = adapt_additive_vp(&x, trained(), &contrastive(&x, &c), &c, variant).unwrap();
        let Some(PromptParams::Additive(p)) = out.prompt else {
            panic!("expected an additive prompt")
        };
        let worst =
            p.v.data()
                .iter()
                .zip(p.mask.data())
                .map(|(v, m)| (v * m).abs())
                .fold(0.0f32, f32::max);
        assert!(worst <= 8.0 / 255.0 + 1e-7, "{worst}");
        assert!(worst > 0.0);
    }
}

#[test]
fn padding_prompt_only_touches_the_frame() {
    let (x, _) = batch(4, 8);
    let mut c = cfg(4);
    c.fallback = false;
    let pad = adapt_additive_vp(&x, trained(), &contrastive(&x, &c), &c, VpVariant::Padding).unwrap();
    let patch = adapt_additive_vp(&x, trained(), &contrastive(&x, &c), &c, VpVariant::Patch).unwrap();
    let mask = frame_mask(3, SIDE, SIDE, c.vp.padding_width);
    let per_image = mask.len();
    let mut interior_patch_moved = false;
    for (i, ((&a, &p), &orig)) in pad.adapted.data().iter().zip(patch.adapted.data()).zip(x.data()).enumerate() {
        if mask.data()[i % per_image] == 0.0 {
            assert_eq!(a, orig);
            interior_patch_moved |= p != orig;
        }
    }
    assert!(interior_patch_moved);
}

#[test]
fn lvp_with_zeroed_singular_values_is_identity() {
    let (x, _) = batch(4, 9);
    let c = cfg(0);
    let mut init = lvp_init(&x, 3).unwrap();
    init.zero_singular_values();
    let out = adapt_lvp_from(&x, init, trained(), &contrastive(&x, &c), &c).unwrap();
    assert!(out.adapted.bit_eq(&x));
}

#[test]
fn lvp_trace_and_fallback() {
    let (x, _) = batch(4, 11);
    let c = cfg(3);
    let out = adapt_lvp(&x, trained(), &contrastive(&x, &c), &c).unwrap();
    assert_eq!(out.loss_trace.len(), 4);
    assert!(out.final_loss <= out.initial_loss());
    let Some(PromptParams::Lvp(p)) = &out.prompt else {
        panic!("expected a low-rank prompt")
    };
    assert_eq!(p.rank, 3);
}

#[test]
fn zero_step_finetune_matches_frozen_predictions() {
    let (x, _) = batch(8, 12);
    let mut c = cfg(0);
    c.finetune.steps = 0;
    let mut b = trained().clone();
    let out = adapt_weights(&x, &mut b, &contrastive(&x, &c), &c, ParamScope::All).unwrap();
    let (logits, pred) = trained().predict(&x).unwrap();
    assert!(out.logits.bit_eq(&logits));
    assert_eq!(out.predictions, pred);
    assert!(out.changed_tensors.is_empty());
    assert!(b.bit_eq(trained()));
}

#[test]
fn bn_affine_finetune_only_moves_gamma_and_beta() {
    let (x, _) = batch(8, 13);
    let mut c = cfg(0);
    c.finetune.steps = 2;
    c.finetune.lr = 0.05;
    let mut b = trained().clone();
    let out = adapt_weights(&x, &mut b, &contrastive(&x, &c), &c, ParamScope::BnAffine).unwrap();
    assert!(!out.changed_tensors.is_empty());
    for name in &out.changed_tensors {
        assert!(name.ends_with(".gamma") || name.ends_with(".beta"), "{name}");
    }
    assert!(b.bit_eq(trained()));
    assert_eq!(out.loss_trace.len(), 3);

    let full = adapt_weights(&x, &mut b, &contrastive(&x, &c), &c, ParamScope::All).unwrap();
    assert!(full.changed_tensors.iter().any(|n| n == "block0.weight"));
    assert!(b.bit_eq(trained()));
}

#[test]
fn bn_statistics_contract() {
    let (x, _) = batch(1, 14);
    assert!(matches!(bn_statistics_adapt(&x, trained()), Err(Error::InvalidArgument(_))));

    let one = halves(1, 15).images;
    let dup = Tensor::concat_outer(&[one.clone(), one.clone(), one]).unwrap();
    let (logits, _) = bn_statistics_adapt(&dup, trained()).unwrap();
    assert!(logits.is_finite());

    let clean = halves(64, 16).images;
    let before = trained().clone();
    let (_, batch_pred) = bn_statistics_adapt(&clean, trained()).unwrap();
    let (_, eval_pred) = trained().predict(&clean).unwrap();
    let agree = batch_pred.iter().zip(&eval_pred).filter(|(a, b)| a == b).count();
    assert!(agree as f64 / 64.0 >= 0.9, "{agree}/64");
    assert!(trained().bit_eq(&before));
}

#[test]
fn zero_step_tent_equals_bn_statistics() {
    let (x, _) = batch(8, 17);
    let mut c = cfg(0);
    c.tent.steps = 0;
    let mut b = trained().clone();
    let out = tent_episodic(&x, &mut b, &c).unwrap();
    let (logits, pred) = bn_statistics_adapt(&x, trained()).unwrap();
    assert!(out.logits.bit_eq(&logits));
    assert_eq!(out.predictions, pred);
    assert!(b.bit_eq(trained()));
}

#[test]
fn tent_lowers_prediction_entropy() {
    let mut c = cfg(0);
    c.tent.steps = 5;
    let mut b = trained().clone();
    let trials = 20;
    let mut lowered = 0;
    for seed in 0..trials {
        let (x, _) = batch(16, 200 + seed);
        let out = tent_episodic(&x, &mut b, &c).unwrap();
        assert_eq!(out.loss_trace.len(), 6);
        if out.loss_trace[5] <= out.loss_trace[0] {
            lowered += 1;
        }
        assert!(b.bit_eq(trained()));
        assert!(out.changed_tensors.iter().all(|n| n.ends_with(".gamma") || n.ends_with(".beta")));
    }
    assert!(lowered as f64 >= 0.95 * trials as f64, "{lowered}/{trials}");
}

#[test]
fn tent_is_order_invariant() {
    let (x1, _) = batch(8, 18);
    let (x2, _) = batch(8, 19);
    let mut c = cfg(0);
    c.tent.steps = 2;
    let mut b = trained().clone();
    let alone = tent_episodic(&x2, &mut b, &c).unwrap();
    tent_episodic(&x1, &mut b, &c).unwrap();
    let after = tent_episodic(&x2, &mut b, &c).unwrap();
    assert!(alone.logits.bit_eq(&after.logits));
}

#[test]
fn memo_with_identical_copies_is_single_sample_entropy() {
    let x = halves(1, 20).images;
    let views = ViewPlan::sample(x.shape(), 8, &AugmentConfig::disabled(), 0).unwrap();
    let got = memo_objective(&x, trained(), &views).unwrap() as f64;
    let want = entropy_of(&trained().predict(&x).unwrap().0).unwrap();
    assert!((got - want).abs() < 1e-5, "{got} vs {want}");
}

#[test]
fn memo_contract() {
    let (x, _) = batch(2, 21);
    let mut b = trained().clone();
    let mut c = cfg(0);
    assert!(memo_single(&x, &mut b, &c).is_err());
    let one = x.slice_outer(0, 1).unwrap();

    c.memo.weights.steps = 0;
    let frozen = memo_single(&one, &mut b, &c).unwrap();
    assert_eq!(frozen.predictions, trained().predict(&one).unwrap().1);

    c.memo.weights.steps = 1;
    c.memo.weights.lr = 0.05;
    let out = memo_single(&one, &mut b, &c).unwrap();
    assert_eq!(out.loss_trace.len(), 2);
    assert!(out.changed_tensors.iter().any(|n| n == "block0.weight"));
    assert!(b.bit_eq(trained()));

    c.memo.augmentations = 1;
    assert!(memo_single(&one, &mut b, &c).is_err());
}

#[test]
fn compose_with_identity_is_plain_cvp() {
    let (x, _) = batch(8, 22);
    let c = cfg(2);
    let obj = contrastive(&x, &c);
    let mut b = trained().clone();
    let composed = compose(WeightMethod::Identity, &x, &mut b, &obj, &c).unwrap();
    let plain = adapt_cvp(&x, trained(), &obj, BnMode::Eval, &c).unwrap();
    assert!(composed.adapted.bit_eq(&plain.adapted));
    assert!(composed.logits.bit_eq(&plain.logits));
    assert_eq!(composed.loss_trace, plain.loss_trace);
}

#[test]
fn compose_tent_with_frozen_zero_lambda_is_tent() {
    let (x, _) = batch(8, 23);
    let mut c = cfg(2);
    c.tent.steps = 2;
    c.cvp.lambda_range = (0.0, 0.0);
    let obj = contrastive(&x, &c);
    let mut b = trained().clone();
    let composed = compose(WeightMethod::Tent, &x, &mut b, &obj, &c).unwrap();
    let tent = tent_episodic(&x, &mut b, &c).unwrap();
    assert_eq!(composed.predictions, tent.predictions);
    assert!(composed.logits.bit_eq(&tent.logits));
    assert!(b.bit_eq(trained()));
    assert!(!composed.changed_tensors.is_empty());
}

#[test]
fn compose_memo_restores_and_keeps_the_bound() {
    let (x, _) = batch(3, 24);
    let mut c = cfg(1);
    c.memo.augmentations = 2;
    let obj = contrastive(&x, &c);
    let mut b = trained().clone();
    let out = compose(WeightMethod::Memo, &x, &mut b, &obj, &c).unwrap();
    assert_eq!(out.predictions.len(), 3);
    assert_eq!(out.adapted.shape(), x.shape());
    assert!(out.final_loss <= out.initial_loss());
    assert!(b.bit_eq(trained()));
}

#[test]
fn run_method_is_deterministic() {
    let (x, labels) = batch(8, 25);
    let mut c = cfg(2);
    c.augment = AugmentConfig::default();
    let mut b = trained().clone();
    for m in [Method::Cvp, Method::Tent, Method::WithCvp(WeightMethod::Bn)] {
        let a = run_method(m, &x, Some(&labels), &mut b, heads(), &c).unwrap();
        let again = run_method(m, &x, Some(&labels), &mut b, heads(), &c).unwrap();
        assert!(a.logits.bit_eq(&again.logits), "{m}");
        assert_eq!(a.loss_trace, again.loss_trace);
    }
    let std = run_method(Method::Standard, &x, None, &mut b, heads(), &c).unwrap();
    assert_eq!(std.predictions, trained().predict(&x).unwrap().1);
}

#[test]
fn objective_needs_matching_head() {
    let (x, _) = batch(2, 26);
    let mut c = cfg(0);
    c.ssl_task = SslTask::Rotation;
    assert!(objective(&c, heads(), &x, None).is_err());
    c.ssl_task = SslTask::Supervised;
    assert!(objective(&c, heads(), &x, None).is_err());
}

#[test]
fn method_names_round_trip() {
    let all = [
        Method::Standard,
        Method::Cvp,
        Method::VpPatch,
        Method::VpPadding,
        Method::Lvp,
        Method::Finetune,
        Method::PartialFinetune,
        Method::Bn,
        Method::Tent,
        Method::Memo,
        Method::WithCvp(WeightMethod::Bn),
        Method::WithCvp(WeightMethod::Tent),
        Method::WithCvp(WeightMethod::Memo),
    ];
    for m in all {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    assert!("sgd".parse::<Method>().is_err());
}

#[test]
fn config_validation() {
    assert!(AdaptConfig::default().validate().is_ok());
    let mut c = AdaptConfig::default();
    c.cvp.lambda_range = (3.0, 0.5);
    assert!(c.validate().is_err());
    let c = AdaptConfig {
        batch_size: 0,
        ..Default::default()
    };
    assert!(c.validate().is_err());
}
