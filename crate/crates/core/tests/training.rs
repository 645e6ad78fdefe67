mod common;

use common::*;
use matrn_core::checkpoint;
use matrn_core::config::{Config, FeVariant, MaskMode, ModelConfig, SesMode};
use matrn_core::data::{build_dataset, encode, lexicon, render_word, Dataset, ImageSample, RenderSize, NUM_CLASSES};
use matrn_core::model::{combine_losses, loss_terms};
use matrn_core::params::{breakdown, count_parameters, fusion_ratio};
use matrn_core::seed::decode_word;
use matrn_core::training::{evaluate, Batch, Trainer};
use matrn_core::{Error, Matrn, Mode};
use matrn_tensor::gradcheck::relative_error;
use matrn_tensor::{ParamId, Tape, Tensor};
use rand::Rng;

const MICRO: RenderSize = RenderSize { height: 8, width: 16, channels: 1 };

fn micro_batch(words: &[&str]) -> Batch<f64> {
    let samples: Vec<ImageSample> = words.iter().enumerate().map(|(i, w)| render_word(w, i as u64, MICRO).unwrap()).collect();
    let refs: Vec<&ImageSample> = samples.iter().collect();
    Batch::new(&refs, 4).unwrap()
}

#[test]
fn loss_term_count_follows_iterations() {
    let batch = micro_batch(&["ab", "cde"]);
    for m in [1, 2, 3, 5] {
        let model = Matrn::<f64>::new(&ModelConfig { iterations: m, ..micro_config() }, 0).unwrap();
        let tape = Tape::new();
        let out = model.forward(&tape, &batch.images, &batch.lengths, Mode::Eval, None).unwrap();
        assert_eq!(out.iterations.len(), m);
        assert_eq!(loss_terms(&out, &batch.targets).unwrap().len(), 1 + 4 * m);
    }
}

#[test]
fn identical_heads_collapse_to_five_terms() {
    let logits = random(&[2 * 4, NUM_CLASSES], 3);
    let targets = [1, 2, 36, 36, 4, 5, 6, 36];
    for m in [1, 2, 3, 5] {
        let tape = Tape::new();
        let single = tape.constant(logits.clone()).cross_entropy(&targets, None).unwrap();
        let terms: Vec<_> = (0..1 + 4 * m).map(|_| tape.constant(logits.clone()).cross_entropy(&targets, None).unwrap()).collect();
        let total = combine_losses(&terms).unwrap().value().data()[0];
        let l = single.value().data()[0];
        assert!((total - 5.0 * l).abs() < 1e-6);
    }
    let tape = Tape::new();
    let bad: Vec<_> = (0..4).map(|_| tape.constant(Tensor::scalar(1.0))).collect();
    assert!(combine_losses(&bad).is_err());
}

/// Central differences over selected parameter tensors against the tape gradient.
fn param_gradcheck(model: &mut Matrn<f64>, batch: &Batch<f64>, ids: &[ParamId], seed_head_only: bool) -> f64 {
    let loss_of = |model: &Matrn<f64>, with_grads: bool| {
        let tape = Tape::new();
        let mut r = rng(9);
        let out = model.forward(&tape, &batch.images, &batch.lengths, Mode::Train, Some(&mut r)).unwrap();
        let terms = loss_terms(&out, &batch.targets).unwrap();
        let loss = if seed_head_only { terms[0] } else { combine_losses(&terms).unwrap() };
        let v = loss.value().data()[0];
        let g = with_grads.then(|| tape.backward(loss).unwrap());
        (v, g.map(|g| ids.iter().map(|&id| g.param(id).map(|s| s.to_vec())).collect::<Vec<_>>()))
    };
    let (_, grads) = loss_of(model, true);
    let grads = grads.unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        let n = model.store.tensor(id).numel();
        let mut numeric = Vec::with_capacity(n);
        for j in 0..n {
            let orig = model.store.tensor(id).data()[j];
            model.store.tensor_mut(id).data_mut()[j] = orig + h;
            let up = loss_of(model, false).0;
            model.store.tensor_mut(id).data_mut()[j] = orig - h;
            let down = loss_of(model, false).0;
            model.store.tensor_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let analytic = grads[k].clone().unwrap_or_else(|| vec![0.0; n]);
        // Gradients that vanish identically (e.g. key biases under softmax) only
        // carry finite-difference noise, so they are held to an absolute bound.
        let abs = max_abs_diff(&analytic, &numeric);
        let e = if abs < 1e-7 { 0.0 } else { relative_error(&analytic, &numeric) };
        assert!(e < 1e-3, "{}: rel {e} abs {abs}", model.store.name(id));
        worst = worst.max(e);
    }
    worst
}

#[test]
fn micro_model_loss_gradients() {
    let cfg = ModelConfig { iterations: 1, mask_k: Some(2), keep_prob: 0.0, ..micro_config() };
    let mut model = Matrn::<f64>::new(&cfg, 1).unwrap();
    let batch = micro_batch(&["ab", "cde"]);
    // The language model sees detached distributions, so the full loss is checked
    // w.r.t. everything downstream of that boundary, and the seed head w.r.t. the rest.
    let downstream: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, n, _)| !n.starts_with("vm.") && !n.starts_with("seed."))
        .map(|(id, _, _)| id)
        .collect();
    let upstream: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, n, t)| (n.starts_with("vm.") || n.starts_with("seed.")) && t.numel() <= 600)
        .map(|(id, _, _)| id)
        .collect();
    assert!(downstream.len() > 20 && upstream.len() > 10);
    param_gradcheck(&mut model, &batch, &downstream, false);
    param_gradcheck(&mut model, &batch, &upstream, true);
}

#[test]
fn untrained_model_is_at_chance() {
    let cfg = Config::desk();
    let model = Matrn::<f32>::new(&cfg.model, 0).unwrap();
    let mut r = rng(21);
    let letters: Vec<char> = ('a'..='z').collect();
    let samples = (0..100)
        .map(|i| {
            let w: String = (0..5).map(|_| letters[r.random_range(0..26)]).collect();
            render_word(&w, i, RenderSize { height: 16, width: 64, channels: 1 }).unwrap()
        })
        .collect();
    let acc = evaluate(&model, &Dataset { samples }, 50).unwrap().accuracy;
    assert!(acc < 0.01, "{acc}");
    assert!(matches!(evaluate(&model, &Dataset { samples: vec![] }, 8), Err(Error::Usage(_))));
}

#[test]
fn analytic_counts_match_built_models() {
    let mut configs = vec![ModelConfig::desk(), ModelConfig::paper(), micro_config()];
    for &fe in FeVariant::ALL {
        for &mask in MaskMode::ALL {
            configs.push(ModelConfig { fe_variant: fe, mask_mode: mask, ..micro_config() });
        }
    }
    configs.push(ModelConfig { share_seq_pe: false, modality_embedding: true, ..micro_config() });
    configs.push(ModelConfig { ses_mode: SesMode::None, ..ModelConfig::desk().fusion_disabled() });
    for cfg in configs {
        let built = Matrn::<f32>::new(&cfg, 0).unwrap().num_parameters();
        assert_eq!(count_parameters(&cfg), built, "{cfg:?}");
    }
}

#[test]
fn multimodal_overhead_is_enhancer_plus_generator() {
    let full = ModelConfig { mask_mode: MaskMode::None, ..ModelConfig::desk() };
    let base = full.fusion_disabled();
    let model = Matrn::<f32>::new(&full, 0).unwrap();
    let prefixed = |p: &str| model.store.iter().filter(|(_, n, _)| n.starts_with(p)).map(|(_, _, t)| t.numel()).sum::<usize>();
    let b = breakdown(&full);
    assert_eq!(count_parameters(&full) - count_parameters(&base), b.enhancer + b.char_generator);
    assert_eq!(b.enhancer, prefixed("fe."));
    assert_eq!(b.char_generator, prefixed("chargen."));
}

#[test]
fn paper_scale_overhead_ratio() {
    let r = fusion_ratio(&ModelConfig::paper());
    assert!((1.15..=1.25).contains(&r), "{r}");
}

fn tiny_config(seed: u64) -> Config {
    let mut c = Config::desk();
    c.model = micro_config();
    c.train.epochs = 2;
    c.train.batch_size = 4;
    c.train.seed = seed;
    c
}

fn tiny_data() -> (Dataset, Dataset) {
    let words = lexicon::sample_words(6, 3).into_iter().filter(|w| w.len() <= 3).collect::<Vec<_>>();
    let words = if words.is_empty() { vec!["ab".to_string(), "cd".into()] } else { words };
    let train = build_dataset(&words, 2, 1, MICRO).unwrap();
    let val = build_dataset(&words, 1, 2, MICRO).unwrap();
    (train, val)
}

#[test]
fn fixed_seed_runs_are_identical() {
    let (train, val) = tiny_data();
    let run = || {
        let cfg = tiny_config(5);
        let mut t = Trainer::<f64>::new(&cfg.model, &cfg.train).unwrap();
        let recs = t.fit(&train, &val, |_| {}).unwrap();
        (recs.iter().map(|r| (r.word_accuracy, r.losses.clone(), r.total_loss)).collect::<Vec<_>>(), t.model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    for ((_, _, x), (_, _, y)) in ma.store.iter().zip(mb.store.iter()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn evaluation_leaves_weights_alone() {
    let (_, val) = tiny_data();
    let model = Matrn::<f64>::new(&micro_config(), 0).unwrap();
    let before: Vec<Vec<f64>> = model.store.iter().map(|(_, _, t)| t.data().to_vec()).collect();
    let a = evaluate(&model, &val, 4).unwrap();
    let b = evaluate(&model, &val, 3).unwrap();
    assert_eq!(a.predictions, b.predictions);
    let after: Vec<Vec<f64>> = model.store.iter().map(|(_, _, t)| t.data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (train, val) = tiny_data();
    let cfg = tiny_config(1);
    let mut t = Trainer::<f32>::new(&cfg.model, &cfg.train).unwrap();
    t.run_epoch(&train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &t.model, &cfg, t.epoch).unwrap();
    let ck = checkpoint::load(&path).unwrap();
    assert_eq!(ck.epoch, 1);
    assert_eq!(ck.config, cfg);
    let loaded = ck.into_model::<f32>().unwrap();
    for ((_, na, a), (_, nb, b)) in t.model.store.iter().zip(loaded.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let e1 = evaluate(&t.model, &val, 8).unwrap();
    let e2 = evaluate(&loaded, &val, 8).unwrap();
    assert_eq!(e1.accuracy, e2.accuracy);
    assert_eq!(e1.predictions, e2.predictions);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = tiny_config(0);
    let model = Matrn::<f32>::new(&cfg.model, 0).unwrap();
    let bytes = checkpoint::encode(&model, &cfg, 0);
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    for bad in [flipped, bytes[..bytes.len() - 9].to_vec(), b"not a checkpoint".to_vec()] {
        assert!(matches!(checkpoint::decode(&bad), Err(Error::Checkpoint(_))));
    }
    assert!(checkpoint::decode(&bytes).is_ok());
}

#[test]
fn single_word_overfit() {
    let cfg = Config::desk();
    let sample = render_word("river", 7, RenderSize { height: 16, width: 64, channels: 1 }).unwrap();
    let batch = Batch::<f32>::new(&[&sample], cfg.model.max_len).unwrap();
    let mut t = Trainer::<f32>::new(&cfg.model, &cfg.train).unwrap();
    let mut losses = Vec::new();
    let mut solved_at = None;
    for step in 0..200 {
        losses.push(t.step(&batch, cfg.train.lr).unwrap().loss);
        let tape = Tape::new();
        let out = t.model.forward(&tape, &batch.images, &batch.lengths, Mode::Eval, None).unwrap();
        if decode_word(out.logits_ev.value().data(), NUM_CLASSES) == "river" {
            solved_at = Some(step + 1);
            break;
        }
    }
    let steps = solved_at.expect("seed head never read the word");
    assert!(steps <= 200);
    let k = (losses.len() / 5).max(1);
    let head: f64 = losses[..k].iter().sum::<f64>() / k as f64;
    let tail: f64 = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
    assert!(tail < head);
    assert_eq!(encode("river", 12).unwrap().true_length, 5);
}
