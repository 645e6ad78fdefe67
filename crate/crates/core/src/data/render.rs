use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::charset::{index_of, normalize};
use super::font::{ink, GLYPH_H, GLYPH_W};
use super::image::Image;
use crate::error::Result;

/// A rendered word with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: Image,
    pub label: String,
    /// Per-character `[x0, x1)` extents at mid-height, in output pixels.
    pub char_boxes: Option<Vec<(f32, f32)>>,
}

/// Output geometry for [`render_word`].
#[derive(Debug, Clone, Copy)]
pub struct RenderSize {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

const CANVAS_H: f64 = 32.0;
const SUPERSAMPLE: usize = 3;

#[derive(Debug, Clone, Copy)]
struct Style {
    sx: f64,
    sy: f64,
    advance: f64,
    slant: f64,
    bold: f64,
    top: f64,
    left: f64,
    right: f64,
    bg: [f32; 3],
    fg: [f32; 3],
}

impl Style {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let sy = rng.random_range(3.0..3.8);
        let sx = sy * rng.random_range(0.7..1.0);
        let gap = rng.random_range(0.8..1.6);
        let top = (CANVAS_H - GLYPH_H as f64 * sy) / 2.0 + rng.random_range(-1.5..1.5);
        let bg_level: f32 = rng.random_range(0.0..1.0);
        let contrast: f32 = rng.random_range(0.45..0.9);
        let fg_level = if bg_level > 0.5 { (bg_level - contrast).max(0.0) } else { (bg_level + contrast).min(1.0) };
        let mut tint = || rng.random_range(-0.08f32..0.08);
        let bg = [0, 1, 2].map(|_| (bg_level + tint()).clamp(0.0, 1.0));
        let fg = [0, 1, 2].map(|_| (fg_level + tint()).clamp(0.0, 1.0));
        Self {
            sx,
            sy,
            advance: (GLYPH_W as f64 + gap) * sx,
            slant: rng.random_range(-0.25..0.25),
            bold: rng.random_range(0.0..0.25),
            top,
            left: rng.random_range(1.0..6.0),
            right: rng.random_range(1.0..6.0),
            bg,
            fg,
        }
    }

    fn coverage(&self, glyphs: &[usize], x: f64, y: f64) -> bool {
        let v = (y - self.top) / self.sy;
        let xs = x - self.left + self.slant * (y - (self.top + GLYPH_H as f64 * self.sy / 2.0));
        if xs < 0.0 {
            return false;
        }
        let slot = (xs / self.advance) as usize;
        let Some(&g) = glyphs.get(slot) else { return false };
        let u = (xs - slot as f64 * self.advance) / self.sx;
        let m = self.bold;
        let (u0, u1) = ((u - m).floor().max(0.0) as usize, (u + m).floor().max(0.0) as usize);
        let (v0, v1) = ((v - m).floor(), (v + m).floor());
        if v1 < 0.0 {
            return false;
        }
        let (v0, v1) = (v0.max(0.0) as usize, v1 as usize);
        (u0..=u1).any(|cu| {
            (v0..=v1).any(|cv| {
                ink(g, cu, cv)
                    && u >= cu as f64 - m
                    && u <= cu as f64 + 1.0 + m
                    && v >= cv as f64 - m
                    && v <= cv as f64 + 1.0 + m
            })
        })
    }
}

/// Draws `text` with the built-in font. The result depends only on `(text, style_seed, size)`.
pub fn render_word(text: &str, style_seed: u64, size: RenderSize) -> Result<ImageSample> {
    let label = normalize(text)?;
    let glyphs: Vec<usize> = label.chars().map(|c| index_of(c).expect("normalized")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
    let style = Style::sample(&mut rng);

    let ink_w = (glyphs.len() - 1) as f64 * style.advance + GLYPH_W as f64 * style.sx;
    let canvas_w = (style.left + ink_w + style.right).ceil() as usize;
    let canvas_h = CANVAS_H as usize;
    let channels = size.channels;
    let mut pixels = Vec::with_capacity(canvas_h * canvas_w * channels);
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..canvas_h {
        for px in 0..canvas_w {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    hits += style.coverage(&glyphs, x, y) as usize;
                }
            }
            let a = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            for c in 0..channels {
                let ch = if channels == 1 { 0 } else { c };
                let (bg, fg) = if channels == 1 {
                    (mean3(&style.bg), mean3(&style.fg))
                } else {
                    (style.bg[ch], style.fg[ch])
                };
                pixels.push(bg + (fg - bg) * a);
            }
        }
    }
    let canvas = Image::new(canvas_h, canvas_w, channels, pixels);
    let image = canvas.resize(size.height, size.width);
    let scale = size.width as f64 / canvas_w as f64;
    let boxes = (0..glyphs.len())
        .map(|i| {
            let x0 = style.left + i as f64 * style.advance;
            ((x0 * scale) as f32, ((x0 + GLYPH_W as f64 * style.sx) * scale) as f32)
        })
        .collect();
    Ok(ImageSample { image, label, char_boxes: Some(boxes) })
}

fn mean3(v: &[f32; 3]) -> f32 {
    (v[0] + v[1] + v[2]) / 3.0
}
