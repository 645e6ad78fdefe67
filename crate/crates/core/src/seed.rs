//! Position-query attention decoder: a mini U-Net produces keys from the visual
//! features, learned position embeddings `P^S` query them, and the attended
//! features are classified per position. The character generator over the
//! enhanced visual features is a second, independently parameterised instance.

use matrn_tensor::{Float, ParamId, Var};

use crate::config::ModelConfig;
use crate::data::NUM_CLASSES;
use crate::error::Result;
use crate::nn::{Conv, Ctx, Init, Linear};
use crate::vision::{flatten_map, unflatten_map};

/// One down/up level with a skip connection, same resolution in and out.
#[derive(Debug, Clone)]
pub struct MiniUnet {
    pub enc: Conv,
    pub down: Conv,
    pub mid: Conv,
    pub fuse: Conv,
    pub h: usize,
    pub w: usize,
}

impl MiniUnet {
    pub fn new<F: Float>(init: &mut Init<'_, F>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let (d, cu) = (cfg.d_model, cfg.unet_channels);
        Ok(Self {
            enc: Conv::new(init, &format!("{name}.enc"), d, cu, 3, 1)?,
            down: Conv::new(init, &format!("{name}.down"), cu, cu, 3, 2)?,
            mid: Conv::new(init, &format!("{name}.mid"), cu, cu, 3, 1)?,
            fuse: Conv::new(init, &format!("{name}.fuse"), 2 * cu, d, 1, 1)?,
            h: cfg.feat_h(),
            w: cfg.feat_w(),
        })
    }

    /// `[B, N, D] → [B, N, D]`.
    pub fn forward<'t, F: Float>(&self, cx: &Ctx<'t, F>, v: Var<'t, F>) -> Result<Var<'t, F>> {
        self.forward_with(cx, v, true)
    }

    /// `skip = false` replaces the skip branch by zeros (probe only).
    pub fn forward_with<'t, F: Float>(&self, cx: &Ctx<'t, F>, v: Var<'t, F>, skip: bool) -> Result<Var<'t, F>> {
        let x = unflatten_map(v, self.h, self.w)?;
        let e0 = self.enc.forward(cx, x)?.relu()?;
        let m = self.down.forward(cx, e0)?.relu()?;
        let m = self.mid.forward(cx, m)?.relu()?;
        let up = m.upsample2x()?;
        let skip_branch = if skip { e0 } else { e0.scale(0.0)? };
        let joined = cx.tape.concat(&[up, skip_branch], 1)?;
        flatten_map(self.fuse.forward(cx, joined)?)
    }
}

/// `softmax(P^S Kᵀ / √D)` over the key axis: `[T, D] × [B, N, D] → [B, T, N]`.
pub fn attention_map<'t, F: Float>(queries: Var<'t, F>, keys: Var<'t, F>) -> Result<Var<'t, F>> {
    let ks = keys.shape();
    let d = ks[2];
    let q = queries.expand_batch(ks[0])?;
    Ok(q.bmm_nt(keys)?.scale(1.0 / (d as f64).sqrt())?.softmax(2)?)
}

/// `E = A Ṽ`: `[B, T, N] × [B, N, D] → [B, T, D]`.
pub fn aggregate<'t, F: Float>(attn: Var<'t, F>, values: Var<'t, F>) -> Result<Var<'t, F>> {
    Ok(attn.bmm(values)?)
}

pub struct DecoderOutput<'t, F: Float> {
    pub attn: Var<'t, F>,
    pub aggregated: Var<'t, F>,
    pub logits: Var<'t, F>,
}

#[derive(Debug, Clone)]
pub struct PositionDecoder {
    pub unet: MiniUnet,
    pub pos: ParamId,
    pub classifier: Linear,
}

impl PositionDecoder {
    pub fn new<F: Float>(init: &mut Init<'_, F>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            unet: MiniUnet::new(init, &format!("{name}.unet"), cfg)?,
            pos: init.trunc_normal(&format!("{name}.pos"), &[cfg.max_len, cfg.d_model], 0.02)?,
            classifier: Linear::new(init, &format!("{name}.cls"), cfg.d_model, NUM_CLASSES, false)?,
        })
    }

    pub fn forward<'t, F: Float>(&self, cx: &Ctx<'t, F>, v: Var<'t, F>) -> Result<DecoderOutput<'t, F>> {
        let keys = self.unet.forward(cx, v)?;
        let attn = attention_map(cx.p(self.pos), keys)?;
        let aggregated = aggregate(attn, v)?;
        let logits = self.classifier.forward(cx, aggregated)?;
        Ok(DecoderOutput { attn, aggregated, logits })
    }
}

/// Argmax per position; `logits` is `[T, C]` row-major.
pub fn greedy_indices<F: Float>(logits: &[F], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, F::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Greedy decode: argmax per position, stopping at the first pad.
pub fn decode_word<F: Float>(logits: &[F], classes: usize) -> String {
    crate::data::decode(&greedy_indices(logits, classes))
}
