//! Cross-modal stage: spatial encoding of semantics, feature enhancement,
//! feature masking and the gated output fusion.

use matrn_tensor::{Float, ParamId, Var};
use rand::Rng;

use crate::config::{FeVariant, ModelConfig, SesMode};
use crate::error::{Error, Result};
use crate::nn::{mask_bias, CrossBlock, Ctx, EncoderBlock, Init, LayerNorm, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `S + A P̃^V`: `[B, T, D]`, `[B, T, N]`, `[N, D]`.
pub fn ses<'t, F: Float>(s: Var<'t, F>, attn: Var<'t, F>, pv: Var<'t, F>) -> Result<Var<'t, F>> {
    let b = attn.shape()[0];
    Ok(s.add(attn.bmm(pv.expand_batch(b)?)?)?)
}

/// Applies the configured spatial encoding. `seq_table` is the `[T, D]` sinusoid used
/// by [`SesMode::SequentialPe`].
pub fn align<'t, F: Float>(
    mode: SesMode,
    s: Var<'t, F>,
    attn: Var<'t, F>,
    pv: Var<'t, F>,
    seq_table: Var<'t, F>,
) -> Result<Var<'t, F>> {
    match mode {
        SesMode::None => Ok(s),
        SesMode::SequentialPe => Ok(s.add(seq_table)?),
        SesMode::Ses => ses(s, attn, pv),
    }
}

#[derive(Debug, Clone)]
enum FeBlocks {
    Joint(Vec<EncoderBlock>),
    Cross(Vec<CrossBlock>),
}

pub struct FeOutput<'t, F: Float> {
    pub visual: Var<'t, F>,
    pub semantic: Var<'t, F>,
    /// Attention weights of every block.
    pub weights: Vec<Var<'t, F>>,
}

#[derive(Debug, Clone)]
pub struct FeatureEnhancer {
    pub variant: FeVariant,
    blocks: FeBlocks,
    pub ln: LayerNorm,
    /// `[2, D]` rows added to visual and semantic tokens when enabled.
    pub modality: Option<ParamId>,
}

impl FeatureEnhancer {
    /// `None` for [`FeVariant::None`].
    pub fn new<F: Float>(init: &mut Init<'_, F>, cfg: &ModelConfig) -> Result<Option<Self>> {
        let (d, h, ffn) = (cfg.d_model, cfg.heads, cfg.ffn);
        let blocks = match cfg.fe_variant {
            FeVariant::None => return Ok(None),
            FeVariant::Multimodal => FeBlocks::Joint(
                (0..cfg.fe_blocks)
                    .map(|i| EncoderBlock::new(init, &format!("fe.block{i}"), d, h, ffn))
                    .collect::<Result<_>>()?,
            ),
            FeVariant::Semantic | FeVariant::Visual => FeBlocks::Cross(
                (0..cfg.fe_blocks)
                    .map(|i| CrossBlock::new(init, &format!("fe.block{i}"), d, h, ffn))
                    .collect::<Result<_>>()?,
            ),
        };
        let modality = if cfg.modality_embedding { Some(init.trunc_normal("fe.modality", &[2, d], 0.02)?) } else { None };
        Ok(Some(Self { variant: cfg.fe_variant, blocks, ln: LayerNorm::new(init, "fe.ln", d)?, modality }))
    }

    /// The self-attention blocks of the multimodal variant.
    pub fn joint_blocks(&self) -> Option<&[EncoderBlock]> {
        match &self.blocks {
            FeBlocks::Joint(b) => Some(b),
            FeBlocks::Cross(_) => None,
        }
    }

    pub fn forward<'t, F: Float>(&self, cx: &Ctx<'t, F>, v: Var<'t, F>, s: Var<'t, F>) -> Result<FeOutput<'t, F>> {
        self.forward_with_bias(cx, v, s, None)
    }

    /// `bias` is an additive `[Lq, Lk]` attention bias for every block (debug probes).
    pub fn forward_with_bias<'t, F: Float>(
        &self,
        cx: &Ctx<'t, F>,
        v: Var<'t, F>,
        s: Var<'t, F>,
        bias: Option<Var<'t, F>>,
    ) -> Result<FeOutput<'t, F>> {
        let (n, t) = (v.shape()[1], s.shape()[1]);
        let (v, s) = match self.modality {
            Some(id) => {
                let table = cx.p(id);
                (v.add(table.narrow(0, 0, 1)?)?, s.add(table.narrow(0, 1, 1)?)?)
            }
            None => (v, s),
        };
        let mut weights = Vec::new();
        match (&self.blocks, self.variant) {
            (FeBlocks::Joint(blocks), _) => {
                let mut x = cx.tape.concat(&[v, s], 1)?;
                for b in blocks {
                    let (nx, w) = b.forward(cx, x, bias)?;
                    x = nx;
                    weights.push(w);
                }
                let x = self.ln.forward(cx, x)?;
                Ok(FeOutput { visual: x.narrow(1, 0, n)?, semantic: x.narrow(1, n, t)?, weights })
            }
            (FeBlocks::Cross(blocks), FeVariant::Semantic) => {
                let mut x = s;
                for b in blocks {
                    let (nx, w) = b.forward(cx, x, v, bias)?;
                    x = nx;
                    weights.push(w);
                }
                Ok(FeOutput { visual: v, semantic: self.ln.forward(cx, x)?, weights })
            }
            (FeBlocks::Cross(blocks), _) => {
                let mut x = v;
                for b in blocks {
                    let (nx, w) = b.forward(cx, x, s, bias)?;
                    x = nx;
                    weights.push(w);
                }
                Ok(FeOutput { visual: self.ln.forward(cx, x)?, semantic: s, weights })
            }
        }
    }
}

/// Joint-sequence bias letting every query see only the first `n` (visual) keys.
pub fn visual_keys_only<F: Float>(n: usize, t: usize) -> matrn_tensor::Tensor<F> {
    mask_bias(n + t, n + t, |_, j| j >= n)
}

/// Mean attention mass from semantic queries onto visual keys and from visual queries
/// onto semantic keys, for joint weights `[B, heads, N+T, N+T]`.
pub fn cross_modal_mass<F: Float>(weights: &matrn_tensor::Tensor<F>, n: usize) -> (f64, f64) {
    let s = weights.shape();
    let l = s[3];
    let mut sem_to_vis = 0.0;
    let mut vis_to_sem = 0.0;
    let rows = weights.numel() / l;
    let (mut n_sem, mut n_vis) = (0usize, 0usize);
    for (r, row) in weights.data().chunks_exact(l).enumerate().take(rows) {
        let q = r % l;
        if q >= n {
            sem_to_vis += row[..n].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
            n_sem += 1;
        } else {
            vis_to_sem += row[n..].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
            n_vis += 1;
        }
    }
    (sem_to_vis / n_sem.max(1) as f64, vis_to_sem / n_vis.max(1) as f64)
}

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// One image's visual-clue masking decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CluePlan {
    pub position: usize,
    pub rows: Vec<usize>,
    /// False when the keep branch fired and nothing is replaced.
    pub applied: bool,
}

/// Picks a character position uniformly in `[0, true_length)`, takes the `k`
/// visual positions it attends to most, and masks them unless the keep branch
/// (probability `keep_prob`) fires. `attn` is that image's `[T, N]` map.
pub fn plan_visual_clue<R: Rng + ?Sized>(
    attn: &[f64],
    n: usize,
    k: usize,
    keep_prob: f64,
    true_length: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<CluePlan> {
    if mode == Mode::Eval {
        return Err(Error::Usage("visual clue masking is a training-time operation".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("mask budget {k} outside [1, {n}]")));
    }
    let t = attn.len() / n;
    if true_length == 0 || true_length > t {
        return Err(Error::Input(format!("true length {true_length} outside [1, {t}]")));
    }
    let position = rng.random_range(0..true_length);
    let rows = top_k(&attn[position * n..(position + 1) * n], k);
    let applied = rng.random::<f64>() >= keep_prob;
    Ok(CluePlan { position, rows, applied })
}

/// Per-row flags for `[B, N, D]` features from the plans of each image.
pub fn clue_row_mask(plans: &[CluePlan], n: usize) -> Vec<bool> {
    let mut mask = vec![false; plans.len() * n];
    for (b, p) in plans.iter().enumerate() {
        if p.applied {
            for &r in &p.rows {
                mask[b * n + r] = true;
            }
        }
    }
    mask
}

/// Masks visual clues of every image in `v: [B, N, D]` using the seed attention
/// `attn: [B, T, N]`. Returns the masked features and the plans.
#[allow(clippy::too_many_arguments)]
pub fn visual_clue_mask<'t, F: Float, R: Rng + ?Sized>(
    v: Var<'t, F>,
    attn: Var<'t, F>,
    token: Var<'t, F>,
    k: usize,
    keep_prob: f64,
    lengths: &[usize],
    mode: Mode,
    rng: &mut R,
) -> Result<(Var<'t, F>, Vec<CluePlan>)> {
    let a = attn.value().to_f64_vec();
    let s = attn.shape();
    let (b, t, n) = (s[0], s[1], s[2]);
    if lengths.len() != b {
        return Err(Error::Input(format!("{} lengths for a batch of {b}", lengths.len())));
    }
    let plans = (0..b)
        .map(|i| plan_visual_clue(&a[i * t * n..(i + 1) * t * n], n, k, keep_prob, lengths[i], mode, rng))
        .collect::<Result<Vec<_>>>()?;
    let masked = v.replace_rows(token, &clue_row_mask(&plans, n))?;
    Ok((masked, plans))
}

/// Independently flags each of `rows` rows with probability `p`.
pub fn random_feature_mask<R: Rng + ?Sized>(rows: usize, p: f64, mode: Mode, rng: &mut R) -> Result<Vec<bool>> {
    if mode == Mode::Eval {
        return Err(Error::Usage("random feature masking is a training-time operation".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("masking probability {p} outside [0, 1]")));
    }
    Ok((0..rows).map(|_| rng.random::<f64>() < p).collect())
}

/// `F = G ⊙ E + (1 − G) ⊙ S`.
pub fn blend<'t, F: Float>(gate: Var<'t, F>, e: Var<'t, F>, s: Var<'t, F>) -> Result<Var<'t, F>> {
    Ok(gate.mul(e)?.add(gate.one_minus()?.mul(s)?)?)
}

#[derive(Debug, Clone)]
pub struct GatedFusion {
    pub w: Linear,
}

impl GatedFusion {
    pub fn new<F: Float>(init: &mut Init<'_, F>, d: usize) -> Result<Self> {
        Ok(Self { w: Linear::new(init, "gate", 2 * d, d, false)? })
    }

    /// Returns `(F, G)` with `G = σ([E; S] W)`.
    pub fn forward<'t, F: Float>(&self, cx: &Ctx<'t, F>, e: Var<'t, F>, s: Var<'t, F>) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let joined = cx.tape.concat(&[e, s], 2)?;
        let gate = self.w.forward(cx, joined)?.sigmoid()?;
        Ok((blend(gate, e, s)?, gate))
    }
}
