//! Closed-form parameter counts, independent of module construction.

use crate::config::{FeVariant, MaskMode, ModelConfig};
use crate::data::NUM_CLASSES;

fn linear(i: usize, o: usize, bias: bool) -> usize {
    i * o + if bias { o } else { 0 }
}

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn layer_norm(d: usize) -> usize {
    2 * d
}

fn attention(d: usize) -> usize {
    4 * linear(d, d, true)
}

fn ffn(d: usize, h: usize) -> usize {
    linear(d, h, true) + linear(h, d, true)
}

fn encoder_block(d: usize, h: usize) -> usize {
    2 * layer_norm(d) + attention(d) + ffn(d, h)
}

fn cross_block(d: usize, h: usize) -> usize {
    3 * layer_norm(d) + attention(d) + ffn(d, h)
}

fn position_decoder(cfg: &ModelConfig) -> usize {
    let (d, cu) = (cfg.d_model, cfg.unet_channels);
    let unet = conv(d, cu, 3) + 2 * conv(cu, cu, 3) + conv(2 * cu, d, 1);
    unet + cfg.max_len * d + linear(d, NUM_CLASSES, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Breakdown {
    pub backbone: usize,
    pub vision_blocks: usize,
    pub seed_decoder: usize,
    pub language_model: usize,
    pub enhancer: usize,
    pub char_generator: usize,
    pub fusion: usize,
    pub mask_tokens: usize,
}

impl Breakdown {
    pub fn total(&self) -> usize {
        self.backbone
            + self.vision_blocks
            + self.seed_decoder
            + self.language_model
            + self.enhancer
            + self.char_generator
            + self.fusion
            + self.mask_tokens
    }
}

pub fn breakdown(cfg: &ModelConfig) -> Breakdown {
    let (d, f) = (cfg.d_model, cfg.ffn);
    let mut backbone = conv(cfg.channels, cfg.stem, 3);
    let mut cin = cfg.stem;
    for st in &cfg.backbone {
        backbone += conv(cin, st.width, 3) + conv(st.width, st.width, 3);
        if cin != st.width || st.stride != 1 {
            backbone += conv(cin, st.width, 1);
        }
        cin = st.width;
    }
    if cin != d {
        backbone += conv(cin, d, 1);
    }
    let lm_pos = if cfg.share_seq_pe { 0 } else { cfg.max_len * d };
    let language_model =
        linear(NUM_CLASSES, d, false) + cfg.lm_blocks * cross_block(d, f) + layer_norm(d) + lm_pos;
    let enhancer = match cfg.fe_variant {
        FeVariant::None => 0,
        FeVariant::Multimodal => cfg.fe_blocks * encoder_block(d, f) + layer_norm(d),
        FeVariant::Semantic | FeVariant::Visual => cfg.fe_blocks * cross_block(d, f) + layer_norm(d),
    } + if cfg.modality_embedding && cfg.fe_variant != FeVariant::None { 2 * d } else { 0 };
    Breakdown {
        backbone,
        vision_blocks: cfg.vm_blocks * encoder_block(d, f) + layer_norm(d),
        seed_decoder: position_decoder(cfg),
        language_model,
        enhancer,
        char_generator: if cfg.fe_variant == FeVariant::None { 0 } else { position_decoder(cfg) },
        fusion: linear(2 * d, d, false) + 3 * linear(d, NUM_CLASSES, true),
        mask_tokens: if cfg.mask_mode == MaskMode::None { 0 } else { d },
    }
}

pub fn count_parameters(cfg: &ModelConfig) -> usize {
    breakdown(cfg).total()
}

/// Full model size over the same config with every fusion addition disabled.
pub fn fusion_ratio(cfg: &ModelConfig) -> f64 {
    count_parameters(cfg) as f64 / count_parameters(&cfg.fusion_disabled()) as f64
}
