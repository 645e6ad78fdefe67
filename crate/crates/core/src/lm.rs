//! Bidirectional cross-attention language model over (soft) character
//! distributions. Position embeddings query an embedding of the input
//! distributions; each position is blocked from attending to its own input.

use matrn_tensor::{Float, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{mask_bias, CrossBlock, Ctx, Init, LayerNorm, Linear};

/// Allowed (`true`) query/key pairs: everything except the diagonal.
pub fn diagonal_attention_mask(t: usize) -> Vec<Vec<bool>> {
    if t < 2 {
        log::warn!("diagonal mask with T = {t} allows no attention at all");
    }
    (0..t).map(|i| (0..t).map(|j| i != j).collect()).collect()
}

/// Checks that every `[.., C]` row of `y` sums to 1 within 1e-3.
pub fn check_distributions<F: Float>(y: &Tensor<F>) -> Result<()> {
    let c = *y.shape().last().expect("rank >= 1");
    for (r, row) in y.data().chunks_exact(c).enumerate() {
        let s: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
        if !s.is_finite() || (s - 1.0).abs() > 1e-3 || row.iter().any(|v| v.to_f64_lossy() < -1e-6) {
            return Err(Error::Input(format!("row {r} of the language-model input is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

pub struct LmOutput<'t, F: Float> {
    /// `S`, `[B, T, D]`.
    pub features: Var<'t, F>,
    /// Cross-attention weights of every block, `[B, heads, T, T]`.
    pub weights: Vec<Var<'t, F>>,
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub embed: Linear,
    pub blocks: Vec<CrossBlock>,
    pub ln: LayerNorm,
    pub diag_mask: bool,
    pub max_len: usize,
}

impl LanguageModel {
    pub fn new<F: Float>(init: &mut Init<'_, F>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let blocks = (0..cfg.lm_blocks)
            .map(|i| CrossBlock::new(init, &format!("{name}.block{i}"), cfg.d_model, cfg.heads, cfg.ffn))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed: Linear::new(init, &format!("{name}.embed"), NUM_CLASSES, cfg.d_model, false)?,
            blocks,
            ln: LayerNorm::new(init, &format!("{name}.ln"), cfg.d_model)?,
            diag_mask: cfg.lm_diag_mask,
            max_len: cfg.max_len,
        })
    }

    /// `y: [B, T, C]` distributions, `pos: [T, D]`. No gradient reaches `y`.
    pub fn forward<'t, F: Float>(&self, cx: &Ctx<'t, F>, y: Var<'t, F>, pos: Var<'t, F>) -> Result<LmOutput<'t, F>> {
        let s = y.shape();
        if s.len() != 3 || s[1] != self.max_len || s[2] != NUM_CLASSES {
            return Err(Error::Input(format!(
                "language-model input {s:?}, expected [B, {}, {NUM_CLASSES}]",
                self.max_len
            )));
        }
        check_distributions(&y.value())?;
        let y = y.detach();
        let memory = self.embed.forward(cx, y)?.add(pos)?;
        let mut x = pos.expand_batch(s[0])?;
        let bias = self.diag_mask.then(|| {
            let allowed = diagonal_attention_mask(self.max_len);
            cx.constant(mask_bias(self.max_len, self.max_len, |i, j| !allowed[i][j]))
        });
        let mut weights = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (nx, w) = b.forward(cx, x, memory, bias)?;
            x = nx;
            weights.push(w);
        }
        Ok(LmOutput { features: self.ln.forward(cx, x)?, weights })
    }
}

/// The language model with its own position table and classifier, trained alone
/// as a spelling corrector.
pub struct StandaloneLm<F: Float> {
    pub store: ParamStore<F>,
    pub lm: LanguageModel,
    pub pos: ParamId,
    pub head: Linear,
    pub max_len: usize,
}

impl<F: Float> StandaloneLm<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let lm = LanguageModel::new(&mut init, "lm", cfg)?;
        let pos = init.trunc_normal("lm.pos", &[cfg.max_len, cfg.d_model], 0.02)?;
        let head = Linear::new(&mut init, "lm.head", cfg.d_model, NUM_CLASSES, true)?;
        Ok(Self { store, lm, pos, head, max_len: cfg.max_len })
    }

    /// Logits `[B, T, C]` for input distributions `[B, T, C]`.
    pub fn logits<'t>(&self, cx: &Ctx<'t, F>, y: Var<'t, F>) -> Result<Var<'t, F>> {
        let s = self.lm.forward(cx, y, cx.p(self.pos))?;
        self.head.forward(cx, s.features)
    }
}

/// One-hot `[B, T, C]` encoding of index sequences.
pub fn one_hot<F: Float>(seqs: &[Vec<usize>], max_len: usize) -> Result<Tensor<F>> {
    let mut data = vec![F::zero(); seqs.len() * max_len * NUM_CLASSES];
    for (b, seq) in seqs.iter().enumerate() {
        if seq.len() != max_len {
            return Err(Error::Input(format!("sequence of length {} for T = {max_len}", seq.len())));
        }
        for (t, &c) in seq.iter().enumerate() {
            if c >= NUM_CLASSES {
                return Err(Error::Input(format!("class index {c} out of range")));
            }
            data[(b * max_len + t) * NUM_CLASSES + c] = F::one();
        }
    }
    Ok(Tensor::from_vec(&[seqs.len(), max_len, NUM_CLASSES], data)?)
}
