//! The full recognizer: visual encoder, seed decoder, iterated language model,
//! spatial alignment, feature enhancement, character generator and gated fusion.

use matrn_tensor::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{FeVariant, MaskMode, ModelConfig};
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::fusion::{self, CluePlan, FeatureEnhancer, GatedFusion, Mode};
use crate::lm::LanguageModel;
use crate::nn::{sinusoidal_1d, Ctx, Init, Linear};
use crate::seed::PositionDecoder;
use crate::vision::VisionEncoder;

/// Everything one refinement iteration produces. `[B, T, ·]` unless noted.
pub struct Iteration<'t, F: Float> {
    /// Distributions fed to the language model (already detached).
    pub lm_input: Var<'t, F>,
    pub semantic: Var<'t, F>,
    pub aligned: Var<'t, F>,
    /// `V^M`, `[B, N, D]`.
    pub visual_mm: Var<'t, F>,
    pub semantic_mm: Var<'t, F>,
    pub visual_seq: Var<'t, F>,
    pub fused: Var<'t, F>,
    pub gate: Var<'t, F>,
    pub logits_s: Var<'t, F>,
    pub logits_sm: Var<'t, F>,
    pub logits_evm: Var<'t, F>,
    pub logits_f: Var<'t, F>,
    pub fe_weights: Vec<Var<'t, F>>,
    /// Character-generator attention `[B, T, N]`, absent without enhancement.
    pub chargen_attn: Option<Var<'t, F>>,
}

pub struct ForwardOutput<'t, F: Float> {
    /// `Ṽ`, `[B, N, D]`.
    pub visual: Var<'t, F>,
    /// `Ṽ` after training-time masking (identical to `visual` otherwise).
    pub masked_visual: Var<'t, F>,
    /// `A^{V-S}`, `[B, T, N]`.
    pub attn: Var<'t, F>,
    pub visual_seq: Var<'t, F>,
    pub logits_ev: Var<'t, F>,
    pub iterations: Vec<Iteration<'t, F>>,
    /// Number of visual-clue masking invocations during this pass.
    pub mask_calls: usize,
    pub clue_plans: Vec<CluePlan>,
}

impl<'t, F: Float> ForwardOutput<'t, F> {
    /// Head logits in loss order: `E^V`, then `S, S^M, E^{V^M}, F` per iteration.
    pub fn head_logits(&self) -> Vec<Var<'t, F>> {
        let mut out = vec![self.logits_ev];
        for it in &self.iterations {
            out.extend([it.logits_s, it.logits_sm, it.logits_evm, it.logits_f]);
        }
        out
    }

    pub fn final_logits(&self) -> Var<'t, F> {
        self.iterations.last().expect("at least one iteration").logits_f
    }
}

pub struct Matrn<F: Float> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub vision: VisionEncoder,
    pub seed: PositionDecoder,
    pub lm: LanguageModel,
    /// Language-model position table when it is not shared with the seed decoder.
    pub lm_pos: Option<ParamId>,
    pub fe: Option<FeatureEnhancer>,
    pub chargen: Option<PositionDecoder>,
    pub gate: GatedFusion,
    pub head_s: Linear,
    pub head_sm: Linear,
    pub head_f: Linear,
    pub visual_token: Option<ParamId>,
    pub semantic_token: Option<ParamId>,
    pv: Tensor<F>,
    seq_table: Tensor<F>,
}

impl<F: Float> Matrn<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let d = cfg.d_model;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let vision = VisionEncoder::new(&mut init, &cfg)?;
        let seed_dec = PositionDecoder::new(&mut init, "seed", &cfg)?;
        let lm = LanguageModel::new(&mut init, "lm", &cfg)?;
        let lm_pos = if cfg.share_seq_pe { None } else { Some(init.trunc_normal("lm.pos", &[cfg.max_len, d], 0.02)?) };
        let fe = FeatureEnhancer::new(&mut init, &cfg)?;
        let chargen = match cfg.fe_variant {
            FeVariant::None => None,
            _ => Some(PositionDecoder::new(&mut init, "chargen", &cfg)?),
        };
        let gate = GatedFusion::new(&mut init, d)?;
        let head_s = Linear::new(&mut init, "head.s", d, NUM_CLASSES, true)?;
        let head_sm = Linear::new(&mut init, "head.sm", d, NUM_CLASSES, true)?;
        let head_f = Linear::new(&mut init, "head.f", d, NUM_CLASSES, true)?;
        let visual_token = match cfg.mask_mode {
            MaskMode::VisualClue | MaskMode::VisualRandom => Some(init.trunc_normal("mask.visual", &[d], 0.02)?),
            _ => None,
        };
        let semantic_token = match cfg.mask_mode {
            MaskMode::Semantic => Some(init.trunc_normal("mask.semantic", &[d], 0.02)?),
            _ => None,
        };
        let pv = vision.position_table()?;
        let seq_table = sinusoidal_1d(cfg.max_len, d);
        Ok(Self {
            config: cfg,
            store,
            vision,
            seed: seed_dec,
            lm,
            lm_pos,
            fe,
            chargen,
            gate,
            head_s,
            head_sm,
            head_f,
            visual_token,
            semantic_token,
            pv,
            seq_table,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.count()
    }

    /// `P̃^V`, `[N, D]`.
    pub fn visual_positions(&self) -> &Tensor<F> {
        &self.pv
    }

    /// Runs all iterations. `lengths` are the true label lengths (used by masking);
    /// `rng` is required in training mode when the config masks anything.
    pub fn forward<'t>(
        &'t self,
        tape: &'t Tape<F>,
        images: &Tensor<F>,
        lengths: &[usize],
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput<'t, F>> {
        let cfg = &self.config;
        let cx = Ctx::new(tape, &self.store);
        let batch = images.shape()[0];
        let (n, t) = (cfg.visual_len(), cfg.max_len);

        let visual = self.vision.encode(&cx, tape.constant(images.clone()))?.features;
        let seed_out = self.seed.forward(&cx, visual)?;
        let attn = seed_out.attn;
        let seed_pos = cx.p(self.seed.pos);
        let lm_pos = self.lm_pos.map_or(seed_pos, |id| cx.p(id));
        let pv = cx.constant(self.pv.clone());
        let seq_table = cx.constant(self.seq_table.clone());

        let mut mask_calls = 0;
        let mut clue_plans = Vec::new();
        let mut masked_visual = visual;
        let mut semantic_rows: Option<Vec<bool>> = None;
        if mode == Mode::Train && cfg.mask_mode != MaskMode::None {
            let rng = rng.ok_or_else(|| Error::Usage("training-mode masking needs an rng".into()))?;
            match cfg.mask_mode {
                MaskMode::VisualClue => {
                    let token = cx.p(self.visual_token.expect("built with a visual token"));
                    let (m, plans) = fusion::visual_clue_mask(
                        visual,
                        attn,
                        token,
                        cfg.mask_budget(),
                        cfg.keep_prob,
                        lengths,
                        mode,
                        rng,
                    )?;
                    mask_calls += 1;
                    masked_visual = m;
                    clue_plans = plans;
                }
                MaskMode::VisualRandom => {
                    let token = cx.p(self.visual_token.expect("built with a visual token"));
                    let rows = fusion::random_feature_mask(batch * n, cfg.mask_rate, mode, rng)?;
                    masked_visual = visual.replace_rows(token, &rows)?;
                }
                MaskMode::Semantic => {
                    semantic_rows = Some(fusion::random_feature_mask(batch * t, cfg.mask_rate, mode, rng)?);
                }
                MaskMode::None => {}
            }
        }

        let mut iterations: Vec<Iteration<'t, F>> = Vec::with_capacity(cfg.iterations);
        for i in 0..cfg.iterations {
            let source = if i == 0 { seed_out.logits } else { iterations[i - 1].logits_f };
            let lm_input = source.softmax(2)?.detach();
            let semantic = self.lm.forward(&cx, lm_input, lm_pos)?.features;
            let logits_s = self.head_s.forward(&cx, semantic)?;
            let mut aligned = fusion::align(cfg.ses_mode, semantic, attn, pv, seq_table)?;
            if let (Some(rows), Some(id)) = (&semantic_rows, self.semantic_token) {
                aligned = aligned.replace_rows(cx.p(id), rows)?;
            }
            let (visual_mm, semantic_mm, fe_weights) = match &self.fe {
                Some(fe) => {
                    let out = fe.forward(&cx, masked_visual, aligned)?;
                    (out.visual, out.semantic, out.weights)
                }
                None => (masked_visual, aligned, Vec::new()),
            };
            let (visual_seq, logits_evm, chargen_attn) = match &self.chargen {
                Some(cg) => {
                    let out = cg.forward(&cx, visual_mm)?;
                    (out.aggregated, out.logits, Some(out.attn))
                }
                None => (seed_out.aggregated, seed_out.logits, None),
            };
            let logits_sm = self.head_sm.forward(&cx, semantic_mm)?;
            let (fused, gate) = self.gate.forward(&cx, visual_seq, semantic_mm)?;
            let logits_f = self.head_f.forward(&cx, fused)?;
            iterations.push(Iteration {
                lm_input,
                semantic,
                aligned,
                visual_mm,
                semantic_mm,
                visual_seq,
                fused,
                gate,
                logits_s,
                logits_sm,
                logits_evm,
                logits_f,
                fe_weights,
                chargen_attn,
            });
        }
        Ok(ForwardOutput {
            visual,
            masked_visual,
            attn,
            visual_seq: seed_out.aggregated,
            logits_ev: seed_out.logits,
            iterations,
            mask_calls,
            clue_plans,
        })
    }
}

/// Per-head cross-entropies in [`ForwardOutput::head_logits`] order.
pub fn loss_terms<'t, F: Float>(out: &ForwardOutput<'t, F>, targets: &[usize]) -> Result<Vec<Var<'t, F>>> {
    out.head_logits().into_iter().map(|l| Ok(l.cross_entropy(targets, None)?)).collect()
}

/// `L_{E^V} + (1/M) Σ_i (L_S + L_{S^M} + L_{E^{V^M}} + L_F)` from the `1 + 4M` terms.
pub fn combine_losses<'t, F: Float>(terms: &[Var<'t, F>]) -> Result<Var<'t, F>> {
    if terms.is_empty() || (terms.len() - 1) % 4 != 0 {
        return Err(Error::Usage(format!("{} loss terms do not match 1 + 4M", terms.len())));
    }
    let m = (terms.len() - 1) / 4;
    let mut rest = terms[1];
    for &t in &terms[2..] {
        rest = rest.add(t)?;
    }
    Ok(terms[0].add(rest.scale(1.0 / m as f64)?)?)
}
