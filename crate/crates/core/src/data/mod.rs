//! Synthetic word images, augmentation, charset encoding and on-disk datasets.

pub mod augment;
pub mod charset;
pub mod dataset;
pub mod font;
pub mod image;
pub mod lexicon;
pub mod render;

pub use augment::augment;
pub use charset::{decode, encode, TokenSequence, NUM_CLASSES, PAD};
pub use dataset::{build_dataset, load_dataset, save_dataset, split, Dataset, Split};
pub use image::Image;
pub use render::{render_word, ImageSample, RenderSize};

use matrn_tensor::{Float, Tensor};

use crate::error::Result;

/// Per-image standardization: zero mean, unit variance, and the sign chosen so
/// the background (estimated from the top and bottom rows) is negative.
pub fn standardize(img: &Image) -> Vec<f64> {
    let n = img.pixels.len() as f64;
    let mean = img.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.pixels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var.sqrt() + 1e-3);
    let row = img.width * img.channels;
    let border = img.pixels[..row].iter().chain(&img.pixels[img.pixels.len() - row..]);
    let bg = border.map(|&v| v as f64 - mean).sum::<f64>();
    let sign = if bg > 0.0 { -inv } else { inv };
    img.pixels.iter().map(|&v| (v as f64 - mean) * sign).collect()
}

/// Stacks standardized images into an `[B, C, H, W]` tensor.
pub fn batch_images<F: Float>(images: &[&Image]) -> Result<Tensor<F>> {
    let first = images.first().ok_or_else(|| crate::Error::Usage("empty image batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(crate::Error::Input(format!(
                "image {}x{}x{} does not match batch shape {h}x{w}x{c}",
                img.height, img.width, img.channels
            )));
        }
        let z = standardize(img);
        for ch in 0..c {
            data.extend(z.iter().skip(ch).step_by(c).map(|&v| F::from_f64_lossy(v)));
        }
    }
    Ok(Tensor::from_vec(&[images.len(), c, h, w], data)?)
}
