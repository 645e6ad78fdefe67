//! Model, training and data configuration, with a flat `key = value` text format:
//!
//! ```text
//! [model]
//! d_model = 64
//! fe_variant = multimodal
//! [train]
//! lr = 0.001
//! ```
//!
//! Keys not given keep their desk-scale defaults. `#` starts a comment.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use matrn_tensor::DType;

use crate::data::RenderSize;
use crate::error::{Error, Result};

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

string_enum!(
    /// Which modalities the feature-enhancement stage lets attend to each other.
    FeVariant { None => "none", Semantic => "semantic", Visual => "visual", Multimodal => "multimodal" }
);
string_enum!(
    /// Positional signal added to the language-model output before enhancement.
    SesMode { None => "none", SequentialPe => "sequential_pe", Ses => "ses" }
);
string_enum!(
    /// Training-time feature masking target.
    MaskMode { None => "none", Semantic => "semantic", VisualRandom => "visual_random", VisualClue => "visual_clue" }
);

/// One residual stage of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub width: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub img_h: usize,
    pub img_w: usize,
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Maximum sequence length `T`, including room for at least one pad.
    pub max_len: usize,
    /// Refinement iterations `M`.
    pub iterations: usize,
    pub stem: usize,
    pub backbone: Vec<Stage>,
    pub vm_blocks: usize,
    pub lm_blocks: usize,
    pub fe_blocks: usize,
    pub unet_channels: usize,
    pub fe_variant: FeVariant,
    pub ses_mode: SesMode,
    pub mask_mode: MaskMode,
    /// Visual-clue mask budget; `None` means `ceil(mask_rate · HW/16)`.
    pub mask_k: Option<usize>,
    pub keep_prob: f64,
    pub mask_rate: f64,
    /// Seed decoder and language model use the same `P^S` table.
    pub share_seq_pe: bool,
    pub lm_diag_mask: bool,
    pub modality_embedding: bool,
    /// Debug: skip the visual Transformer blocks entirely.
    pub vm_identity: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    /// Epoch at which `lr` drops to `lr_final`; `None` means 60% of `epochs`.
    pub decay_epoch: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub precision: DType,
    pub augment: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Stop once validation word accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub words: usize,
    pub per_word: usize,
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            img_h: 16,
            img_w: 64,
            channels: 1,
            d_model: 64,
            heads: 4,
            ffn: 128,
            max_len: 12,
            iterations: 3,
            stem: 16,
            backbone: vec![
                Stage { width: 32, stride: 2 },
                Stage { width: 32, stride: 1 },
                Stage { width: 64, stride: 2 },
                Stage { width: 64, stride: 1 },
            ],
            vm_blocks: 2,
            lm_blocks: 2,
            fe_blocks: 2,
            unet_channels: 32,
            fe_variant: FeVariant::Multimodal,
            ses_mode: SesMode::Ses,
            mask_mode: MaskMode::VisualClue,
            mask_k: None,
            keep_prob: 0.1,
            mask_rate: 0.04,
            share_seq_pe: true,
            lm_diag_mask: true,
            modality_embedding: false,
            vm_identity: false,
        }
    }

    pub fn paper() -> Self {
        Self {
            img_h: 32,
            img_w: 128,
            channels: 3,
            d_model: 512,
            heads: 8,
            ffn: 2048,
            max_len: 25,
            iterations: 3,
            stem: 32,
            backbone: vec![
                Stage { width: 128, stride: 2 },
                Stage { width: 256, stride: 1 },
                Stage { width: 512, stride: 2 },
                Stage { width: 512, stride: 1 },
                Stage { width: 512, stride: 1 },
            ],
            vm_blocks: 2,
            lm_blocks: 4,
            fe_blocks: 2,
            unet_channels: 64,
            ..Self::desk()
        }
    }

    /// The same model with enhancement, spatial encoding and masking switched off.
    pub fn fusion_disabled(&self) -> Self {
        Self {
            fe_variant: FeVariant::None,
            ses_mode: SesMode::None,
            mask_mode: MaskMode::None,
            ..self.clone()
        }
    }

    pub fn render_size(&self) -> RenderSize {
        RenderSize { height: self.img_h, width: self.img_w, channels: self.channels }
    }

    pub fn feat_h(&self) -> usize {
        self.img_h / 4
    }

    pub fn feat_w(&self) -> usize {
        self.img_w / 4
    }

    /// Number of visual positions, `HW/16`.
    pub fn visual_len(&self) -> usize {
        self.feat_h() * self.feat_w()
    }

    pub fn mask_budget(&self) -> usize {
        self.mask_k.unwrap_or_else(|| ((self.mask_rate * self.visual_len() as f64).ceil() as usize).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.img_h == 0 || self.img_w == 0 || self.img_h % 4 != 0 || self.img_w % 4 != 0 {
            return bad(format!("input {}x{} must be positive multiples of 4", self.img_h, self.img_w));
        }
        if self.feat_h() % 2 != 0 || self.feat_w() % 2 != 0 {
            return bad(format!(
                "feature map {}x{} must be even for the U-Net down/up level",
                self.feat_h(),
                self.feat_w()
            ));
        }
        if !matches!(self.channels, 1 | 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be a positive multiple of 4", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.ffn == 0 || self.stem == 0 || self.unet_channels == 0 {
            return bad("ffn, stem and unet_channels must be positive".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} leaves no room for a label and a pad", self.max_len));
        }
        if self.backbone.is_empty() || self.backbone.iter().any(|s| s.width == 0 || !matches!(s.stride, 1 | 2)) {
            return bad("backbone stages need positive widths and strides of 1 or 2".into());
        }
        let down: usize = self.backbone.iter().map(|s| s.stride).product();
        if down != 4 {
            return bad(format!("backbone must downsample by exactly 4, got {down}"));
        }
        if !(0.0..=1.0).contains(&self.keep_prob) {
            return bad(format!("keep_prob {} outside [0, 1]", self.keep_prob));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad(format!("mask_rate {} outside [0, 1]", self.mask_rate));
        }
        let k = self.mask_budget();
        if k == 0 || k > self.visual_len() {
            return bad(format!("mask_k {k} outside [1, {}]", self.visual_len()));
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-3,
            lr_final: 1e-4,
            decay_epoch: None,
            epochs: 30,
            seed: 0,
            precision: DType::F32,
            augment: 0.5,
            clip_norm: 5.0,
            target_accuracy: None,
        }
    }

    pub fn paper() -> Self {
        Self { batch_size: 384, lr: 1e-4, lr_final: 1e-5, decay_epoch: Some(6), epochs: 10, ..Self::desk() }
    }

    pub fn decay_at(&self) -> usize {
        self.decay_epoch.unwrap_or((self.epochs * 6).div_ceil(10))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_at() {
            self.lr
        } else {
            self.lr_final
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.augment < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config("augment and clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

impl DataConfig {
    pub fn desk() -> Self {
        Self { words: 200, per_word: 10, val_fraction: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.words == 0 || self.per_word == 0 {
            return Err(Error::Config("words and per_word must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

impl Config {
    pub fn desk() -> Self {
        Self { model: ModelConfig::desk(), train: TrainConfig::desk(), data: DataConfig::desk() }
    }

    pub fn paper() -> Self {
        Self { model: ModelConfig::paper(), train: TrainConfig::paper(), data: DataConfig::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_named(&text, &path.display().to_string())
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_named(text, "<config>")
    }

    fn parse_named(text: &str, file: &str) -> Result<Self> {
        let mut cfg = Config::desk();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::ConfigLine { file: file.to_string(), line: i + 1, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| err(format!("bad section header `{line}`")))?;
                if !matches!(name, "model" | "train" | "data") {
                    return Err(err(format!("unknown section `{name}`")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(err(format!("key `{key}` outside any section")));
            }
            cfg.set(&section, key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one `section.key`; the error is a bare message for the caller to locate.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: FromStr>(v: &str) -> std::result::Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("bad value `{v}`: {e}"))
        }
        fn opt<T: FromStr>(v: &str) -> std::result::Result<Option<T>, String>
        where
            T::Err: fmt::Display,
        {
            if matches!(v, "auto" | "none") {
                Ok(None)
            } else {
                p(v).map(Some)
            }
        }
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match (section, key) {
            ("model", "img_h") => m.img_h = p(value)?,
            ("model", "img_w") => m.img_w = p(value)?,
            ("model", "channels") => m.channels = p(value)?,
            ("model", "d_model") => m.d_model = p(value)?,
            ("model", "heads") => m.heads = p(value)?,
            ("model", "ffn") => m.ffn = p(value)?,
            ("model", "max_len") => m.max_len = p(value)?,
            ("model", "iterations") => m.iterations = p(value)?,
            ("model", "stem") => m.stem = p(value)?,
            ("model", "backbone") => m.backbone = parse_backbone(value)?,
            ("model", "vm_blocks") => m.vm_blocks = p(value)?,
            ("model", "lm_blocks") => m.lm_blocks = p(value)?,
            ("model", "fe_blocks") => m.fe_blocks = p(value)?,
            ("model", "unet_channels") => m.unet_channels = p(value)?,
            ("model", "fe_variant") => m.fe_variant = p(value)?,
            ("model", "ses_mode") => m.ses_mode = p(value)?,
            ("model", "mask_mode") => m.mask_mode = p(value)?,
            ("model", "mask_k") => m.mask_k = opt(value)?,
            ("model", "keep_prob") => m.keep_prob = p(value)?,
            ("model", "mask_rate") => m.mask_rate = p(value)?,
            ("model", "share_seq_pe") => m.share_seq_pe = p(value)?,
            ("model", "lm_diag_mask") => m.lm_diag_mask = p(value)?,
            ("model", "modality_embedding") => m.modality_embedding = p(value)?,
            ("model", "vm_identity") => m.vm_identity = p(value)?,
            ("train", "batch_size") => t.batch_size = p(value)?,
            ("train", "lr") => t.lr = p(value)?,
            ("train", "lr_final") => t.lr_final = p(value)?,
            ("train", "decay_epoch") => t.decay_epoch = opt(value)?,
            ("train", "epochs") => t.epochs = p(value)?,
            ("train", "seed") => t.seed = p(value)?,
            ("train", "precision") => t.precision = p(value)?,
            ("train", "augment") => t.augment = p(value)?,
            ("train", "clip_norm") => t.clip_norm = p(value)?,
            ("train", "target_accuracy") => t.target_accuracy = opt(value)?,
            ("data", "words") => d.words = p(value)?,
            ("data", "per_word") => d.per_word = p(value)?,
            ("data", "val_fraction") => d.val_fraction = p(value)?,
            _ => return Err(format!("unknown key `{key}` in [{section}]")),
        }
        Ok(())
    }

    /// Full text form; `Config::parse(&c.to_text()) == c`.
    pub fn to_text(&self) -> String {
        fn opt<T: fmt::Display>(v: &Option<T>, none: &str) -> String {
            v.as_ref().map_or_else(|| none.to_string(), |x| x.to_string())
        }
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let backbone: Vec<String> = m.backbone.iter().map(|s| format!("{}/{}", s.width, s.stride)).collect();
        let mut out = String::new();
        let _ = writeln!(out, "[model]");
        let _ = writeln!(out, "img_h = {}", m.img_h);
        let _ = writeln!(out, "img_w = {}", m.img_w);
        let _ = writeln!(out, "channels = {}", m.channels);
        let _ = writeln!(out, "d_model = {}", m.d_model);
        let _ = writeln!(out, "heads = {}", m.heads);
        let _ = writeln!(out, "ffn = {}", m.ffn);
        let _ = writeln!(out, "max_len = {}", m.max_len);
        let _ = writeln!(out, "iterations = {}", m.iterations);
        let _ = writeln!(out, "stem = {}", m.stem);
        let _ = writeln!(out, "backbone = {}", backbone.join(" "));
        let _ = writeln!(out, "vm_blocks = {}", m.vm_blocks);
        let _ = writeln!(out, "lm_blocks = {}", m.lm_blocks);
        let _ = writeln!(out, "fe_blocks = {}", m.fe_blocks);
        let _ = writeln!(out, "unet_channels = {}", m.unet_channels);
        let _ = writeln!(out, "fe_variant = {}", m.fe_variant);
        let _ = writeln!(out, "ses_mode = {}", m.ses_mode);
        let _ = writeln!(out, "mask_mode = {}", m.mask_mode);
        let _ = writeln!(out, "mask_k = {}", opt(&m.mask_k, "auto"));
        let _ = writeln!(out, "keep_prob = {}", m.keep_prob);
        let _ = writeln!(out, "mask_rate = {}", m.mask_rate);
        let _ = writeln!(out, "share_seq_pe = {}", m.share_seq_pe);
        let _ = writeln!(out, "lm_diag_mask = {}", m.lm_diag_mask);
        let _ = writeln!(out, "modality_embedding = {}", m.modality_embedding);
        let _ = writeln!(out, "vm_identity = {}", m.vm_identity);
        let _ = writeln!(out, "\n[train]");
        let _ = writeln!(out, "batch_size = {}", t.batch_size);
        let _ = writeln!(out, "lr = {}", t.lr);
        let _ = writeln!(out, "lr_final = {}", t.lr_final);
        let _ = writeln!(out, "decay_epoch = {}", opt(&t.decay_epoch, "auto"));
        let _ = writeln!(out, "epochs = {}", t.epochs);
        let _ = writeln!(out, "seed = {}", t.seed);
        let _ = writeln!(out, "precision = {}", t.precision);
        let _ = writeln!(out, "augment = {}", t.augment);
        let _ = writeln!(out, "clip_norm = {}", t.clip_norm);
        let _ = writeln!(out, "target_accuracy = {}", opt(&t.target_accuracy, "none"));
        let _ = writeln!(out, "\n[data]");
        let _ = writeln!(out, "words = {}", d.words);
        let _ = writeln!(out, "per_word = {}", d.per_word);
        let _ = writeln!(out, "val_fraction = {}", d.val_fraction);
        out
    }
}

fn parse_backbone(value: &str) -> std::result::Result<Vec<Stage>, String> {
    value
        .split_whitespace()
        .map(|tok| {
            let (w, s) = tok.split_once('/').ok_or_else(|| format!("backbone stage `{tok}` is not width/stride"))?;
            let width = w.parse().map_err(|_| format!("bad backbone width `{w}`"))?;
            let stride = s.parse().map_err(|_| format!("bad backbone stride `{s}`"))?;
            Ok(Stage { width, stride })
        })
        .collect()
}
