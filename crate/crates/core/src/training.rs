//! Training loop, evaluation and the standalone language-model pretraining.

use std::time::Instant;

use matrn_tensor::{Adam, AdamConfig, Float, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, ModelConfig, TrainConfig};
use crate::data::{
    augment, batch_images, build_dataset, encode, lexicon, split, Dataset, Image, ImageSample, Split, NUM_CLASSES, PAD,
};
use crate::error::{Error, Result};
use crate::fusion::{cross_modal_mass, Mode};
use crate::lm::{one_hot, StandaloneLm};
use crate::metrics::{word_accuracy, AttentionStats, MetricsRecord};
use crate::model::{combine_losses, loss_terms, ForwardOutput, Matrn};
use crate::nn::Ctx;
use crate::seed::decode_word;

/// Images, true lengths and flattened `[B·T]` targets.
pub struct Batch<F: Float> {
    pub images: Tensor<F>,
    pub lengths: Vec<usize>,
    pub targets: Vec<usize>,
    pub labels: Vec<String>,
}

impl<F: Float> Batch<F> {
    pub fn new(samples: &[&ImageSample], max_len: usize) -> Result<Self> {
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let mut lengths = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len() * max_len);
        for s in samples {
            let seq = encode(&s.label, max_len)?;
            lengths.push(seq.true_length);
            targets.extend(seq.indices);
        }
        Ok(Self {
            images: batch_images(&images)?,
            lengths,
            targets,
            labels: samples.iter().map(|s| s.label.clone()).collect(),
        })
    }
}

/// Decoded words from the last fusion head.
pub fn predictions<F: Float>(out: &ForwardOutput<'_, F>) -> Vec<String> {
    let logits = out.final_logits().value();
    logits.data().chunks_exact(logits.numel() / logits.shape()[0]).map(|l| decode_word(l, NUM_CLASSES)).collect()
}

fn attention_stats<F: Float>(out: &ForwardOutput<'_, F>, n: usize) -> Option<AttentionStats> {
    let it = out.iterations.last()?;
    if it.fe_weights.is_empty() || it.fe_weights[0].shape()[3] <= n {
        return None;
    }
    let (mut sv, mut vs) = (0.0, 0.0);
    for w in &it.fe_weights {
        let (a, b) = cross_modal_mass(&w.value(), n);
        sv += a;
        vs += b;
    }
    let k = it.fe_weights.len() as f64;
    Some(AttentionStats { semantic_to_visual: sv / k, visual_to_semantic: vs / k })
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub accuracy: f64,
    pub losses: Vec<f64>,
    pub total_loss: f64,
    pub predictions: Vec<String>,
    pub attention: Option<AttentionStats>,
}

/// Word accuracy and mean head losses over `data` in eval mode.
pub fn evaluate<F: Float>(model: &Matrn<F>, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let m = model.config.iterations;
    let mut losses = vec![0.0; 1 + 4 * m];
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(data.len());
    let mut attn = (0.0, 0.0, 0usize);
    for chunk in data.samples.chunks(batch_size.max(1)) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let batch = Batch::<F>::new(&refs, model.config.max_len)?;
        let tape = Tape::new();
        let out = model.forward(&tape, &batch.images, &batch.lengths, Mode::Eval, None)?;
        let terms = loss_terms(&out, &batch.targets)?;
        let w = chunk.len() as f64;
        for (acc, t) in losses.iter_mut().zip(&terms) {
            *acc += t.value().data()[0].to_f64_lossy() * w;
        }
        total += combine_losses(&terms)?.value().data()[0].to_f64_lossy() * w;
        if let Some(s) = attention_stats(&out, model.config.visual_len()) {
            attn = (attn.0 + s.semantic_to_visual * w, attn.1 + s.visual_to_semantic * w, attn.2 + chunk.len());
        }
        preds.extend(predictions(&out));
    }
    let n = data.len() as f64;
    losses.iter_mut().for_each(|l| *l /= n);
    let labels: Vec<&str> = data.labels().collect();
    let attention = (attn.2 > 0).then(|| AttentionStats {
        semantic_to_visual: attn.0 / attn.2 as f64,
        visual_to_semantic: attn.1 / attn.2 as f64,
    });
    Ok(EvalResult { accuracy: word_accuracy(&preds, &labels), losses, total_loss: total / n, predictions: preds, attention })
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub terms: Vec<f64>,
    pub correct: usize,
    pub grad_norm: f64,
}

/// Owns a model, its optimiser and the training-time random streams.
pub struct Trainer<F: Float> {
    pub model: Matrn<F>,
    pub config: TrainConfig,
    pub epoch: usize,
    adam: Adam<F>,
    mask_rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
}

impl<F: Float> Trainer<F> {
    pub fn new(model_cfg: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        let model = Matrn::new(model_cfg, config.seed)?;
        Ok(Self::resume(model, config, 0))
    }

    /// Continues training `model` from `epoch` with fresh optimiser state.
    pub fn resume(model: Matrn<F>, config: &TrainConfig, epoch: usize) -> Self {
        let stream = |k: u64| ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k + epoch as u64 * 16));
        Self {
            model,
            config: config.clone(),
            epoch,
            adam: Adam::new(AdamConfig::default()),
            mask_rng: stream(1),
            data_rng: stream(2),
        }
    }

    pub fn step(&mut self, batch: &Batch<F>, lr: f64) -> Result<StepStats> {
        let tape = Tape::new();
        let (loss, terms, correct, grads) = {
            let out = self.model.forward(&tape, &batch.images, &batch.lengths, Mode::Train, Some(&mut self.mask_rng))?;
            let terms = loss_terms(&out, &batch.targets)?;
            let total = combine_losses(&terms)?;
            let loss = total.value().data()[0].to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Tensor(matrn_tensor::TensorError::NonFinite { op: "training loss" }));
            }
            let values = terms.iter().map(|t| t.value().data()[0].to_f64_lossy()).collect();
            let preds = predictions(&out);
            let correct = preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
            let grads = tape.backward(total)?;
            (loss, values, correct, grads)
        };
        grads.apply_to(&mut self.model.store)?;
        let grad_norm = if self.config.clip_norm > 0.0 {
            self.model.store.clip_grad_norm(self.config.clip_norm)
        } else {
            self.model.store.grad_norm()
        };
        self.adam.step(&mut self.model.store, lr);
        Ok(StepStats { loss, terms, correct, grad_norm })
    }

    /// One pass over `train` in a seeded order with augmentation. Returns the
    /// training record (accuracy measured on the augmented, masked batches).
    pub fn run_epoch(&mut self, train: &Dataset) -> Result<MetricsRecord> {
        if train.is_empty() {
            return Err(Error::Usage("empty training set".into()));
        }
        let start = Instant::now();
        let lr = self.config.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.data_rng);
        let m = self.model.config.iterations;
        let mut sums = vec![0.0; 1 + 4 * m];
        let (mut total, mut correct) = (0.0, 0usize);
        for idx in order.chunks(self.config.batch_size) {
            let samples: Vec<ImageSample> = idx
                .iter()
                .map(|&i| {
                    let seed = self.data_rng.random::<u64>();
                    augment(&train.samples[i], self.config.augment, &mut ChaCha8Rng::seed_from_u64(seed))
                })
                .collect();
            let refs: Vec<&ImageSample> = samples.iter().collect();
            let batch = Batch::new(&refs, self.model.config.max_len)?;
            let stats = self.step(&batch, lr)?;
            let w = idx.len() as f64;
            for (s, t) in sums.iter_mut().zip(&stats.terms) {
                *s += t * w;
            }
            total += stats.loss * w;
            correct += stats.correct;
        }
        let n = train.len() as f64;
        sums.iter_mut().for_each(|s| *s /= n);
        let record = MetricsRecord {
            epoch: self.epoch,
            split: "train".into(),
            word_accuracy: correct as f64 / n,
            losses: sums,
            total_loss: total / n,
            wall_clock_s: start.elapsed().as_secs_f64(),
            parameters: self.model.num_parameters(),
            attention: None,
        };
        self.epoch += 1;
        Ok(record)
    }

    pub fn eval_record(&self, data: &Dataset, split: &str) -> Result<MetricsRecord> {
        let start = Instant::now();
        let r = evaluate(&self.model, data, self.config.batch_size.max(32))?;
        Ok(MetricsRecord {
            epoch: self.epoch.saturating_sub(1),
            split: split.into(),
            word_accuracy: r.accuracy,
            losses: r.losses,
            total_loss: r.total_loss,
            wall_clock_s: start.elapsed().as_secs_f64(),
            parameters: self.model.num_parameters(),
            attention: r.attention,
        })
    }

    /// Trains until `config.epochs` or the target validation accuracy, calling
    /// `on_record` with every train and validation record.
    pub fn fit(&mut self, train: &Dataset, val: &Dataset, mut on_record: impl FnMut(&MetricsRecord)) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        while self.epoch < self.config.epochs {
            let tr = self.run_epoch(train)?;
            on_record(&tr);
            records.push(tr);
            if val.is_empty() {
                continue;
            }
            let vr = self.eval_record(val, "val")?;
            on_record(&vr);
            let done = self.config.target_accuracy.is_some_and(|t| vr.word_accuracy >= t);
            records.push(vr);
            if done {
                break;
            }
        }
        Ok(records)
    }
}

/// Renders `data.words` lexicon words `data.per_word` times each and splits off
/// the validation fraction, all governed by `seed`.
pub fn synthetic_split(config: &Config, seed: u64) -> Result<Split> {
    let d = &config.data;
    let words = lexicon::sample_words(d.words, seed);
    let data = build_dataset(&words, d.per_word, seed, config.model.render_size())?;
    Ok(split(data, d.val_fraction, seed))
}

/// Convenience: build, train and return the trainer for a full config.
pub fn train<F: Float>(
    config: &Config,
    train: &Dataset,
    val: &Dataset,
    on_record: impl FnMut(&MetricsRecord),
) -> Result<(Trainer<F>, Vec<MetricsRecord>)> {
    config.validate()?;
    let mut trainer = Trainer::new(&config.model, &config.train)?;
    let records = trainer.fit(train, val, on_record)?;
    Ok((trainer, records))
}

/// Replaces one character of `word` (as class indices) at a uniform position by a
/// different uniform symbol. Returns the corrupted indices and the position.
pub fn corrupt_once<R: Rng + ?Sized>(seq: &[usize], true_length: usize, rng: &mut R) -> (Vec<usize>, usize) {
    let mut out = seq.to_vec();
    let pos = rng.random_range(0..true_length);
    let mut c = rng.random_range(0..PAD - 1);
    if c >= seq[pos] {
        c += 1;
    }
    out[pos] = c;
    (out, pos)
}

/// Fixed one-in-five split of `(word, position, symbol)` corruptions. Pretraining
/// never draws a held-out corruption and [`lm_correction_rate`] scores only those.
pub fn is_held_out(word: usize, pos: usize, symbol: usize) -> bool {
    let h = (word as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (pos as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ (symbol as u64).wrapping_mul(0x94d0_49bb_1331_11eb);
    (h ^ (h >> 29)) % 5 == 0
}

fn corrupt_split<R: Rng + ?Sized>(word: usize, seq: &[usize], true_length: usize, held_out: bool, rng: &mut R) -> Vec<usize> {
    // Every word of three or more characters has corruptions on both sides of the
    // split; the attempt cap only guards degenerate one-letter lexicons.
    let mut last = seq.to_vec();
    for _ in 0..10_000 {
        let (out, pos) = corrupt_once(seq, true_length, rng);
        if is_held_out(word, pos, out[pos]) == held_out {
            return out;
        }
        last = out;
    }
    last
}

#[derive(Debug, Clone)]
pub struct LmPretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of training inputs left uncorrupted.
    pub clean_fraction: f64,
    pub seed: u64,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 32, lr: 1e-3, clean_fraction: 0.2, seed: 0 }
    }
}

/// Trains the language model alone to map corrupted one-hot spellings of
/// `lexicon` words back to the clean word.
pub fn pretrain_lm<F: Float>(model_cfg: &ModelConfig, lexicon: &[String], cfg: &LmPretrainConfig) -> Result<StandaloneLm<F>> {
    if lexicon.is_empty() {
        return Err(Error::Usage("empty lexicon".into()));
    }
    let t = model_cfg.max_len;
    let seqs = lexicon.iter().map(|w| encode(w, t)).collect::<Result<Vec<_>>>()?;
    let mut lm = StandaloneLm::<F>::new(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a2b);
    for step in 0..cfg.steps {
        let mut inputs = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size * t);
        for _ in 0..cfg.batch_size {
            let k = rng.random_range(0..seqs.len());
            let s = &seqs[k];
            let x = if rng.random::<f64>() < cfg.clean_fraction {
                s.indices.clone()
            } else {
                corrupt_split(k, &s.indices, s.true_length, false, &mut rng)
            };
            inputs.push(x);
            targets.extend_from_slice(&s.indices);
        }
        let x = one_hot::<F>(&inputs, t)?;
        let tape = Tape::new();
        let grads = {
            let cx = Ctx::new(&tape, &lm.store);
            let logits = lm.logits(&cx, tape.constant(x))?;
            let loss = logits.cross_entropy(&targets, None)?;
            tape.backward(loss)?
        };
        grads.apply_to(&mut lm.store)?;
        lm.store.clip_grad_norm(5.0);
        let lr = if step < cfg.steps * 7 / 10 { cfg.lr } else { cfg.lr * 0.1 };
        adam.step(&mut lm.store, lr);
    }
    Ok(lm)
}

/// Fraction of `trials` held-out single-character corruptions that the model maps
/// back to the exact source word.
pub fn lm_correction_rate<F: Float>(lm: &StandaloneLm<F>, lexicon: &[String], trials: usize, seed: u64) -> Result<f64> {
    let t = lm.max_len;
    let seqs = lexicon.iter().map(|w| encode(w, t)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for chunk in (0..trials).collect::<Vec<_>>().chunks(64) {
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut words = Vec::with_capacity(chunk.len());
        for _ in chunk {
            let k = rng.random_range(0..seqs.len());
            inputs.push(corrupt_split(k, &seqs[k].indices, seqs[k].true_length, true, &mut rng));
            words.push(&lexicon[k]);
        }
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &lm.store);
        let logits = lm.logits(&cx, tape.constant(one_hot::<F>(&inputs, t)?))?;
        let v = logits.value();
        for (row, w) in v.data().chunks_exact(t * NUM_CLASSES).zip(&words) {
            if decode_word(row, NUM_CLASSES) == **w {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / trials.max(1) as f64)
}
