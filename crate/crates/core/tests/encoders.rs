mod common;

use common::*;
use matrn_core::config::ModelConfig;
use matrn_core::lm::{diagonal_attention_mask, one_hot, LanguageModel};
use matrn_core::nn::{mask_bias, Ctx, Init};
use matrn_core::seed::{MiniUnet, PositionDecoder};
use matrn_core::vision::{flatten_map, sinusoidal_2d, unflatten_map, VisionEncoder};
use matrn_tensor::{ParamStore, Tape, Tensor};

fn build<T>(cfg: &ModelConfig, seed: u64, f: impl FnOnce(&mut Init<'_, f64>) -> T) -> (ParamStore<f64>, T) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let m = f(&mut Init { store: &mut store, rng: &mut r });
    let _ = cfg;
    (store, m)
}

#[test]
fn desk_features_are_4x16x64() {
    let cfg = ModelConfig::desk();
    let (store, vm) = build(&cfg, 0, |i| VisionEncoder::new(i, &cfg).unwrap());
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let x = tape.constant(random(&[2, 1, 16, 64], 1));
    let map = vm.backbone.forward(&cx, x).unwrap();
    assert_eq!(map.shape(), vec![2, 64, 4, 16]);
    let out = vm.encode(&cx, x).unwrap();
    assert_eq!(out.features.shape(), vec![2, 64, 64]);
}

#[test]
fn zero_image_gives_finite_features() {
    let cfg = ModelConfig::desk();
    let (store, vm) = build(&cfg, 0, |i| VisionEncoder::new(i, &cfg).unwrap());
    let tape = Tape::new();
    let out = vm.encode(&Ctx::new(&tape, &store), tape.constant(Tensor::zeros(&[1, 1, 16, 64]))).unwrap();
    assert!(out.features.value().data().iter().all(|v| v.is_finite()));
}

#[test]
fn first_conv_receives_gradient() {
    let cfg = micro_config();
    let (store, vm) = build(&cfg, 0, |i| VisionEncoder::new(i, &cfg).unwrap());
    let tape = Tape::new();
    let out = vm.encode(&Ctx::new(&tape, &store), tape.constant(random(&[2, 1, 8, 16], 4))).unwrap();
    let loss = out.features.mul(tape.constant(random(&[2, 8, 8], 5))).unwrap().sum().unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.param(vm.backbone.stem.w).expect("stem gradient");
    assert!(g.iter().any(|v| v.abs() > 0.0));
}

#[test]
fn identity_flag_exposes_backbone_plus_positions() {
    let cfg = ModelConfig { vm_identity: true, ..micro_config() };
    let (store, vm) = build(&cfg, 0, |i| VisionEncoder::new(i, &cfg).unwrap());
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let x = tape.constant(random(&[2, 1, 8, 16], 6));
    let got = vm.encode(&cx, x).unwrap().features.to_tensor();
    let map = flatten_map(vm.backbone.forward(&cx, x).unwrap()).unwrap().to_tensor();
    let pe = sinusoidal_2d::<f64>(2, 4, 8).unwrap();
    for (b, chunk) in got.data().chunks(8 * 8).enumerate() {
        for (i, v) in chunk.iter().enumerate() {
            assert!((v - map.data()[b * 64 + i] - pe.data()[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_permutation_permutes_outputs() {
    let cfg = micro_config();
    let (store, vm) = build(&cfg, 0, |i| VisionEncoder::new(i, &cfg).unwrap());
    let x = random(&[3, 1, 8, 16], 7);
    let per = 8 * 16;
    let order = [2, 0, 1];
    let mut permuted = Vec::new();
    for &b in &order {
        permuted.extend_from_slice(&x.data()[b * per..(b + 1) * per]);
    }
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let a = vm.encode(&cx, tape.constant(x)).unwrap().features.to_tensor();
    let b = vm.encode(&cx, tape.constant(Tensor::from_vec(&[3, 1, 8, 16], permuted).unwrap())).unwrap().features.to_tensor();
    let f = 8 * 8;
    for (i, &src) in order.iter().enumerate() {
        assert!(max_abs_diff(&b.data()[i * f..(i + 1) * f], &a.data()[src * f..(src + 1) * f]) < 1e-12);
    }
}

#[test]
fn position_embedding_properties() {
    let a = sinusoidal_2d::<f64>(4, 16, 64).unwrap();
    assert_eq!(a.data(), sinusoidal_2d::<f64>(4, 16, 64).unwrap().data());
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    for i in 0..64 {
        for j in i + 1..64 {
            let d: f64 = (0..64).map(|c| (a.data()[i * 64 + c] - a.data()[j * 64 + c]).powi(2)).sum();
            assert!(d > 1e-6, "positions {i} and {j} coincide");
        }
    }
    assert_eq!(sinusoidal_2d::<f64>(1, 1, 8).unwrap().data()[0], 0.0);
    assert!(sinusoidal_2d::<f64>(2, 2, 6).is_err());
}

#[test]
fn position_embedding_matters_but_is_not_a_parameter() {
    let cfg = micro_config();
    let (store, vm) = build(&cfg, 0, |i| VisionEncoder::new(i, &cfg).unwrap());
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let x = tape.constant(random(&[1, 1, 8, 16], 8));
    let with = vm.encode_with(&cx, x, true).unwrap().features.to_tensor();
    let without = vm.encode_with(&cx, x, false).unwrap().features.to_tensor();
    assert!(with.max_abs_diff(&without) > 1e-6);
    assert!(store.iter().all(|(_, name, _)| !name.contains("pos")));
}

#[test]
fn flatten_round_trip() {
    let x = random(&[2, 3, 4, 6], 9);
    let tape = Tape::new();
    let f = flatten_map(tape.leaf(x.clone())).unwrap();
    assert_eq!(f.shape(), vec![2, 24, 3]);
    // row-major spatial order: position (r, c) is row r*6 + c
    assert_eq!(f.value().data()[(5 * 3) + 1], x.data()[24 + 5]);
    assert_eq!(unflatten_map(f, 4, 6).unwrap().value().data(), x.data());
}

#[test]
fn unet_shape_skip_and_gradients() {
    let cfg = micro_config();
    let (store, unet) = build(&cfg, 0, |i| MiniUnet::new(i, "u", &cfg).unwrap());
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let v = tape.constant(random(&[2, 8, 8], 10));
    let with = unet.forward_with(&cx, v, true).unwrap();
    let without = unet.forward_with(&cx, v, false).unwrap();
    assert_eq!(with.shape(), vec![2, 8, 8]);
    assert!(with.value().max_abs_diff(&without.value()) > 1e-6);
    let loss = with.mul(tape.constant(random(&[2, 8, 8], 11))).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    for id in [unet.enc.w, unet.fuse.w, unet.mid.w] {
        assert!(g.param(id).unwrap().iter().any(|v| v.abs() > 0.0), "{}", store.name(id));
    }
}

#[test]
fn seed_and_character_generators_hold_disjoint_parameters() {
    let cfg = ModelConfig::desk();
    let model = matrn_core::Matrn::<f32>::new(&cfg, 0).unwrap();
    let cg = model.chargen.as_ref().unwrap();
    let seed_ids = [model.seed.pos, model.seed.classifier.w, model.seed.unet.enc.w, model.seed.unet.fuse.w];
    let cg_ids = [cg.pos, cg.classifier.w, cg.unet.enc.w, cg.unet.fuse.w];
    for a in seed_ids {
        assert!(!cg_ids.contains(&a));
    }
    let count = |prefix: &str| model.store.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(_, _, t)| t.numel()).sum::<usize>();
    assert_eq!(count("seed."), count("chargen."));
}

#[test]
fn attention_rows_are_stochastic() {
    let cfg = micro_config();
    let (store, dec) = build(&cfg, 0, |i| PositionDecoder::new(i, "seed", &cfg).unwrap());
    let tape = Tape::new();
    let out = dec.forward(&Ctx::new(&tape, &store), tape.constant(random(&[2, 8, 8], 12))).unwrap();
    assert_eq!(out.attn.shape(), vec![2, 4, 8]);
    for row in out.attn.value().data().chunks(8) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let probs = out.logits.softmax(2).unwrap();
    for row in probs.value().data().chunks(37) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

fn lm_fixture() -> (ParamStore<f64>, LanguageModel, ModelConfig) {
    let cfg = ModelConfig { d_model: 16, heads: 2, ffn: 32, max_len: 5, lm_blocks: 2, ..ModelConfig::desk() };
    let (mut store, lm) = build(&cfg, 3, |i| LanguageModel::new(i, "lm", &cfg).unwrap());
    store.add("pos", random(&[5, 16], 13)).unwrap();
    (store, lm, cfg)
}

#[test]
fn lm_output_shape_and_order_sensitivity() {
    let (store, lm, _) = lm_fixture();
    let pos = store.id("pos").unwrap();
    let a = one_hot::<f64>(&[vec![1, 2, 3, 4, 36]], 5).unwrap();
    let b = one_hot::<f64>(&[vec![4, 3, 2, 1, 36]], 5).unwrap();
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let sa = lm.forward(&cx, tape.constant(a), cx.p(pos)).unwrap().features;
    let sb = lm.forward(&cx, tape.constant(b), cx.p(pos)).unwrap().features;
    assert_eq!(sa.shape(), vec![1, 5, 16]);
    assert!(sa.value().max_abs_diff(&sb.value()) > 1e-6);
}

#[test]
fn lm_rejects_non_distributions() {
    let (store, lm, _) = lm_fixture();
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let mut y = one_hot::<f64>(&[vec![1, 2, 3, 4, 36]], 5).unwrap();
    y.data_mut()[0] = 0.5;
    let err = lm.forward(&cx, tape.constant(y), cx.p(store.id("pos").unwrap()));
    assert!(matches!(err, Err(matrn_core::Error::Input(_))));
}

#[test]
fn lm_blocks_gradient_into_its_input() {
    let (store, lm, _) = lm_fixture();
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let producer = tape.leaf(random(&[1, 5, 37], 14));
    let y = producer.softmax(2).unwrap();
    let s = lm.forward(&cx, y, cx.p(store.id("pos").unwrap())).unwrap().features;
    let grads = tape.backward(s.sum().unwrap()).unwrap();
    assert!(grads.get(producer).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    assert!(grads.param(lm.embed.w).unwrap().iter().any(|v| v.abs() > 0.0));
}

#[test]
fn diagonal_mask_zeroes_self_weight() {
    let m = diagonal_attention_mask(4);
    let bias = mask_bias::<f64>(4, 4, |i, j| !m[i][j]);
    let tape = Tape::new();
    let w = tape.constant(random(&[4, 4], 15)).add(tape.constant(bias)).unwrap().softmax(1).unwrap().to_tensor();
    for i in 0..4 {
        assert_eq!(w.data()[i * 4 + i], 0.0);
    }
}

#[test]
fn masked_position_ignores_its_own_input() {
    let (store, lm, _) = lm_fixture();
    let pos = store.id("pos").unwrap();
    let base = vec![5, 6, 7, 8, 36];
    for i in 0..5 {
        let mut changed = base.clone();
        changed[i] = if base[i] == 20 { 21 } else { 20 };
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let first_block = |seq: &Vec<usize>| {
            let y = tape.constant(one_hot::<f64>(std::slice::from_ref(seq), 5).unwrap());
            let p = cx.p(pos);
            let memory = lm.embed.forward(&cx, y).unwrap().add(p).unwrap();
            let allowed = diagonal_attention_mask(5);
            let bias = cx.constant(mask_bias(5, 5, |a, b| !allowed[a][b]));
            lm.blocks[0].forward(&cx, p.expand_batch(1).unwrap(), memory, Some(bias)).unwrap().0.to_tensor()
        };
        let a = first_block(&base);
        let b = first_block(&changed);
        assert!(max_abs_diff(&a.data()[i * 16..(i + 1) * 16], &b.data()[i * 16..(i + 1) * 16]) < 1e-12);
        let others: f64 = (0..5).filter(|&j| j != i).map(|j| max_abs_diff(&a.data()[j * 16..(j + 1) * 16], &b.data()[j * 16..(j + 1) * 16])).sum();
        assert!(others > 1e-9);
    }
}
