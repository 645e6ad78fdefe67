//! Convolutional backbone, 2-D sinusoidal position embedding and the visual
//! Transformer that together produce the flattened visual features `Ṽ`.

use matrn_tensor::{Float, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{fill_sinusoid, Conv, Ctx, EncoderBlock, Init, LayerNorm};

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub shortcut: Option<Conv>,
}

impl ResBlock {
    fn forward<'t, F: Float>(&self, cx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let h = self.conv1.forward(cx, x)?.relu()?;
        let h = self.conv2.forward(cx, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(cx, x)?,
            None => x,
        };
        Ok(h.add(skip)?.relu()?)
    }
}

/// Stem conv followed by residual stages; downsamples by 4 and ends with `D` channels.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: Conv,
    pub blocks: Vec<ResBlock>,
    pub proj: Option<Conv>,
}

impl Backbone {
    pub fn new<F: Float>(init: &mut Init<'_, F>, cfg: &ModelConfig) -> Result<Self> {
        let stem = Conv::new(init, "vm.backbone.stem", cfg.channels, cfg.stem, 3, 1)?;
        let mut cin = cfg.stem;
        let mut blocks = Vec::with_capacity(cfg.backbone.len());
        for (i, st) in cfg.backbone.iter().enumerate() {
            let name = format!("vm.backbone.block{i}");
            let shortcut = if cin != st.width || st.stride != 1 {
                Some(Conv::new(init, &format!("{name}.shortcut"), cin, st.width, 1, st.stride)?)
            } else {
                None
            };
            blocks.push(ResBlock {
                conv1: Conv::new(init, &format!("{name}.conv1"), cin, st.width, 3, st.stride)?,
                conv2: Conv::new(init, &format!("{name}.conv2"), st.width, st.width, 3, 1)?,
                shortcut,
            });
            cin = st.width;
        }
        let proj = if cin != cfg.d_model {
            Some(Conv::new(init, "vm.backbone.proj", cin, cfg.d_model, 1, 1)?)
        } else {
            None
        };
        Ok(Self { stem, blocks, proj })
    }

    /// `[B, C, H, W] → [B, D, H/4, W/4]`.
    pub fn forward<'t, F: Float>(&self, cx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let mut h = self.stem.forward(cx, x)?.relu()?;
        for b in &self.blocks {
            h = b.forward(cx, h)?;
        }
        if let Some(p) = &self.proj {
            h = p.forward(cx, h)?;
        }
        Ok(h)
    }
}

/// Parameter-free `[h·w, d]` table. Channels `[0, d/2)` encode the row index and
/// `[d/2, d)` the column index, each as interleaved sine/cosine pairs.
pub fn sinusoidal_2d<F: Float>(h: usize, w: usize, d: usize) -> Result<Tensor<F>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!("2-D position embedding needs d divisible by 4, got {d}")));
    }
    let mut data = vec![0.0f64; h * w * d];
    fill_sinusoid(&mut data, h * w, d, 0, d / 2, |p| (p / w) as f64);
    fill_sinusoid(&mut data, h * w, d, d / 2, d / 2, |p| (p % w) as f64);
    Ok(Tensor::from_f64(&[h * w, d], &data)?)
}

/// `[B, D, h, w] → [B, h·w, D]` in row-major spatial order.
pub fn flatten_map<'t, F: Float>(x: Var<'t, F>) -> Result<Var<'t, F>> {
    let s = x.shape();
    Ok(x.permute(&[0, 2, 3, 1])?.reshape(&[s[0], s[2] * s[3], s[1]])?)
}

/// Inverse of [`flatten_map`].
pub fn unflatten_map<'t, F: Float>(x: Var<'t, F>, h: usize, w: usize) -> Result<Var<'t, F>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::Input(format!("cannot unflatten {s:?} to {h}x{w}")));
    }
    Ok(x.reshape(&[s[0], h, w, s[2]])?.permute(&[0, 3, 1, 2])?)
}

pub struct VisualOutput<'t, F: Float> {
    /// Backbone features plus `P^V`, before the Transformer.
    pub embedded: Var<'t, F>,
    /// `Ṽ`, `[B, HW/16, D]`.
    pub features: Var<'t, F>,
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub backbone: Backbone,
    pub blocks: Vec<EncoderBlock>,
    pub ln: LayerNorm,
    pub identity: bool,
    pub feat_h: usize,
    pub feat_w: usize,
    pub d_model: usize,
}

impl VisionEncoder {
    pub fn new<F: Float>(init: &mut Init<'_, F>, cfg: &ModelConfig) -> Result<Self> {
        let backbone = Backbone::new(init, cfg)?;
        let blocks = (0..cfg.vm_blocks)
            .map(|i| EncoderBlock::new(init, &format!("vm.block{i}"), cfg.d_model, cfg.heads, cfg.ffn))
            .collect::<Result<_>>()?;
        Ok(Self {
            backbone,
            blocks,
            ln: LayerNorm::new(init, "vm.ln", cfg.d_model)?,
            identity: cfg.vm_identity,
            feat_h: cfg.feat_h(),
            feat_w: cfg.feat_w(),
            d_model: cfg.d_model,
        })
    }

    pub fn position_table<F: Float>(&self) -> Result<Tensor<F>> {
        sinusoidal_2d(self.feat_h, self.feat_w, self.d_model)
    }

    pub fn encode<'t, F: Float>(&self, cx: &Ctx<'t, F>, images: Var<'t, F>) -> Result<VisualOutput<'t, F>> {
        self.encode_with(cx, images, true)
    }

    /// `add_pe = false` skips the position embedding (sensitivity probes).
    pub fn encode_with<'t, F: Float>(
        &self,
        cx: &Ctx<'t, F>,
        images: Var<'t, F>,
        add_pe: bool,
    ) -> Result<VisualOutput<'t, F>> {
        let s = images.shape();
        if s.len() != 4 || s[2] != self.feat_h * 4 || s[3] != self.feat_w * 4 {
            return Err(Error::Input(format!(
                "image batch {s:?} does not match the model input {}x{}",
                self.feat_h * 4,
                self.feat_w * 4
            )));
        }
        let mut x = flatten_map(self.backbone.forward(cx, images)?)?;
        if add_pe {
            x = x.add(cx.constant(self.position_table()?))?;
        }
        let embedded = x;
        if !self.identity {
            for b in &self.blocks {
                x = b.forward(cx, x, None)?.0;
            }
            x = self.ln.forward(cx, x)?;
        }
        Ok(VisualOutput { embedded, features: x })
    }
}
