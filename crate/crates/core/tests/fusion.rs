mod common;

use common::*;
use matrn_core::config::{FeVariant, MaskMode, ModelConfig, SesMode};
use matrn_core::fusion::{
    clue_row_mask, plan_visual_clue, random_feature_mask, visual_clue_mask, visual_keys_only, FeatureEnhancer,
};
use matrn_core::nn::{Ctx, Init};
use matrn_core::{Error, Matrn, Mode};
use matrn_tensor::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn ses_modes_share_one_parameter_count() {
    for base in [ModelConfig::desk(), ModelConfig::paper(), micro_config()] {
        let counts: Vec<usize> = SesMode::ALL
            .iter()
            .map(|&ses_mode| Matrn::<f32>::new(&ModelConfig { ses_mode, ..base.clone() }, 0).unwrap().num_parameters())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    }
}

fn enhancer(variant: FeVariant, seed: u64) -> (ParamStore<f64>, FeatureEnhancer) {
    let cfg = ModelConfig { fe_variant: variant, ..micro_config() };
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let fe = FeatureEnhancer::new(&mut Init { store: &mut store, rng: &mut r }, &cfg).unwrap().unwrap();
    (store, fe)
}

#[test]
fn enhancement_shapes_and_routing() {
    let v = random(&[2, 8, 8], 1);
    let s = random(&[2, 4, 8], 2);
    for variant in [FeVariant::Semantic, FeVariant::Visual, FeVariant::Multimodal] {
        let (store, fe) = enhancer(variant, 0);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let out = fe.forward(&cx, tape.constant(v.clone()), tape.constant(s.clone())).unwrap();
        assert_eq!(out.visual.shape(), vec![2, 8, 8]);
        assert_eq!(out.semantic.shape(), vec![2, 4, 8]);
        let v_same = out.visual.value().data() == v.data();
        let s_same = out.semantic.value().data() == s.data();
        match variant {
            FeVariant::Semantic => assert!(v_same && !s_same),
            FeVariant::Visual => assert!(!v_same && s_same),
            _ => assert!(!v_same && !s_same),
        }
        for w in &out.weights {
            for row in w.value().data().chunks(*w.shape().last().unwrap()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
    assert!(FeatureEnhancer::new(
        &mut Init { store: &mut ParamStore::<f64>::new(), rng: &mut rng(0) },
        &micro_config().fusion_disabled()
    )
    .unwrap()
    .is_none());
}

#[test]
fn joint_enhancement_isolates_visual_modality() {
    let (store, fe) = enhancer(FeVariant::Multimodal, 4);
    let v = random(&[1, 8, 8], 5);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let bias = cx.constant(visual_keys_only(8, 4));
    let joint = fe.forward_with_bias(&cx, tape.constant(v.clone()), tape.constant(Tensor::zeros(&[1, 4, 8])), Some(bias)).unwrap();

    // the same blocks as plain self-attention over the visual rows alone
    let mut x = tape.constant(v);
    for b in fe.joint_blocks().unwrap() {
        x = b.forward(&cx, x, None).unwrap().0;
    }
    let x = fe.ln.forward(&cx, x).unwrap();
    assert!(max_abs_diff(joint.visual.value().data(), x.value().data()) < 1e-12);
}

#[test]
fn full_budget_masks_every_row() {
    let tape = Tape::new();
    let v = tape.constant(random(&[1, 6, 4], 1));
    let token = tape.constant(Tensor::from_vec(&[4], vec![9.0, 8.0, 7.0, 6.0]).unwrap());
    let a = tape.constant(random_stochastic(3, 6, 2).reshape(&[1, 3, 6]).unwrap());
    let mut r = rng(3);
    loop {
        let (out, plans) = visual_clue_mask(v, a, token, 6, 0.1, &[2], Mode::Train, &mut r).unwrap();
        if plans[0].applied {
            for row in out.value().data().chunks(4) {
                assert_eq!(row, &[9.0, 8.0, 7.0, 6.0]);
            }
            break;
        }
    }
}

#[test]
fn keep_branch_is_identity_and_eval_is_rejected() {
    let tape = Tape::new();
    let v = tape.constant(random(&[1, 6, 4], 1));
    let token = tape.constant(Tensor::zeros(&[4]));
    let a = tape.constant(random_stochastic(3, 6, 2).reshape(&[1, 3, 6]).unwrap());
    let (out, plans) = visual_clue_mask(v, a, token, 2, 1.0, &[3], Mode::Train, &mut rng(0)).unwrap();
    assert!(!plans[0].applied);
    assert_eq!(out.value().data(), v.value().data());
    let err = visual_clue_mask(v, a, token, 2, 0.1, &[3], Mode::Eval, &mut rng(0));
    assert!(matches!(err, Err(Error::Usage(_))));
    assert!(matches!(random_feature_mask(4, 0.1, Mode::Eval, &mut rng(0)), Err(Error::Usage(_))));
    assert!(matches!(random_feature_mask(4, 1.5, Mode::Train, &mut rng(0)), Err(Error::Config(_))));
}

#[test]
fn random_mask_extremes() {
    assert!(random_feature_mask(100, 0.0, Mode::Train, &mut rng(0)).unwrap().iter().all(|&m| !m));
    assert!(random_feature_mask(100, 1.0, Mode::Train, &mut rng(0)).unwrap().iter().all(|&m| m));
}

#[test]
fn clue_rows_are_the_top_attended_positions() {
    let n = 8;
    let attn: Vec<f64> = (0..3 * n).map(|i| ((i * 37) % 11) as f64).collect();
    let mut r = rng(5);
    for _ in 0..50 {
        let plan = plan_visual_clue(&attn, n, 3, 0.1, 2, Mode::Train, &mut r).unwrap();
        assert!(plan.position < 2);
        let row = &attn[plan.position * n..(plan.position + 1) * n];
        let min_chosen = plan.rows.iter().map(|&i| row[i]).fold(f64::INFINITY, f64::min);
        let others = (0..n).filter(|i| !plan.rows.contains(i)).map(|i| row[i]).fold(f64::NEG_INFINITY, f64::max);
        assert!(min_chosen >= others);
    }
}

proptest! {
    #[test]
    fn masked_rows_equal_budget(seed in 0u64..10_000, k in 1usize..=8, len in 1usize..=4) {
        let attn = random_stochastic(4, 8, seed);
        let mut r = rng(seed);
        let plan = plan_visual_clue(&attn.to_f64_vec(), 8, k, 0.1, len, Mode::Train, &mut r).unwrap();
        prop_assert!(plan.position < len);
        let mask = clue_row_mask(std::slice::from_ref(&plan), 8);
        let count = mask.iter().filter(|&&m| m).count();
        prop_assert_eq!(count, if plan.applied { k } else { 0 });
    }

    #[test]
    fn fused_lies_between_inputs(seed in 0u64..10_000) {
        let tape = Tape::new();
        let mut r = rng(seed);
        let g: Vec<f64> = (0..12).map(|_| r.random_range(0.0..=1.0)).collect();
        let e = random(&[1, 3, 4], seed + 1);
        let s = random(&[1, 3, 4], seed + 2);
        let f = matrn_core::fusion::blend(
            tape.constant(Tensor::from_vec(&[1, 3, 4], g).unwrap()),
            tape.constant(e.clone()),
            tape.constant(s.clone()),
        ).unwrap().to_tensor();
        for i in 0..12 {
            let (lo, hi) = (e.data()[i].min(s.data()[i]), e.data()[i].max(s.data()[i]));
            prop_assert!(f.data()[i] >= lo - 1e-12 && f.data()[i] <= hi + 1e-12);
        }
    }
}

#[test]
fn eval_pass_never_masks() {
    let cfg = micro_config();
    let model = Matrn::<f64>::new(&cfg, 0).unwrap();
    let tape = Tape::new();
    let x = random(&[2, 1, 8, 16], 1);
    let out = model.forward(&tape, &x, &[2, 3], Mode::Eval, None).unwrap();
    assert_eq!(out.mask_calls, 0);
    assert!(out.clue_plans.is_empty());
    assert_eq!(out.masked_visual.value().data(), out.visual.value().data());
    let mut r = rng(0);
    let out = model.forward(&tape, &x, &[2, 3], Mode::Train, Some(&mut r)).unwrap();
    assert_eq!(out.mask_calls, 1);
    assert_eq!(out.clue_plans.len(), 2);
    let _ = MaskMode::ALL;
}
