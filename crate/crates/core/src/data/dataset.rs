use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::charset::normalize;
use super::image::{read_pnm, write_pnm};
use super::render::{render_word, ImageSample, RenderSize};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.label.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
}

/// Renders every word `per_word` times with styles drawn from `seed`.
pub fn build_dataset(words: &[String], per_word: usize, seed: u64, size: RenderSize) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(words.len() * per_word);
    for w in words {
        for _ in 0..per_word {
            samples.push(render_word(w, rng.random(), size)?);
        }
    }
    Ok(Dataset { samples })
}

/// Shuffles with `seed` and holds out `round(val_fraction · n)` samples.
pub fn split(data: Dataset, val_fraction: f64, seed: u64) -> Split {
    let mut samples = data.samples;
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5911));
    let n_val = ((samples.len() as f64) * val_fraction).round() as usize;
    let train = samples.split_off(n_val);
    Split { train: Dataset { samples: train }, val: Dataset { samples } }
}

/// Loads `dir/labels.tsv` (`filename<TAB>label` per line) with images under `dir/images/`.
/// Images are stretch-resized and channel-converted to `size`.
pub fn load_dataset(dir: &Path, size: RenderSize) -> Result<Dataset> {
    let labels = dir.join("labels.tsv");
    let text = std::fs::read_to_string(&labels).map_err(|e| Error::io(&labels, e))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Ingest { file: labels.clone(), line: i + 1, msg };
        if line.trim().is_empty() {
            continue;
        }
        let (file, label) = line.split_once('\t').ok_or_else(|| err("expected `filename<TAB>label`".into()))?;
        if file.is_empty() {
            return Err(err("empty filename".into()));
        }
        let label = normalize(label.trim()).map_err(|e| err(e.to_string()))?;
        let image = read_pnm(&dir.join("images").join(file))?;
        let image = image.with_channels(size.channels).resize(size.height, size.width);
        samples.push(ImageSample { image, label, char_boxes: None });
    }
    Ok(Dataset { samples })
}

/// Writes a dataset in the layout [`load_dataset`] reads.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut index = String::new();
    for (i, s) in data.samples.iter().enumerate() {
        let ext = if s.image.channels == 1 { "pgm" } else { "ppm" };
        let name = format!("{i:06}.{ext}");
        write_pnm(&images.join(&name), &s.image)?;
        let _ = writeln!(index, "{name}\t{}", s.label);
    }
    let labels = dir.join("labels.tsv");
    std::fs::write(&labels, index).map_err(|e| Error::io(&labels, e))
}
