use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::image::Image;
use super::render::ImageSample;

/// Random rotation (up to 10° at strength 1), brightness/contrast jitter and Gaussian
/// noise. Strength 0 is the identity; negative strength is treated as 0.
pub fn augment<R: Rng + ?Sized>(sample: &ImageSample, strength: f64, rng: &mut R) -> ImageSample {
    let s = strength.clamp(0.0, 1.0);
    if s == 0.0 {
        return sample.clone();
    }
    let angle = rng.random_range(-10.0..10.0) * s;
    let brightness = rng.random_range(-0.15..0.15) * s;
    let contrast = 1.0 + rng.random_range(-0.3..0.3) * s;
    let sigma = 0.04 * s;

    let mut image = rotate(&sample.image, angle.to_radians());
    let mean = image.pixels.iter().map(|&v| v as f64).sum::<f64>() / image.pixels.len() as f64;
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    for v in &mut image.pixels {
        let jittered = (*v as f64 - mean) * contrast + mean + brightness + noise.sample(rng);
        *v = jittered as f32;
    }
    image.clamp();
    ImageSample { image, label: sample.label.clone(), char_boxes: None }
}

/// Bilinear rotation about the centre with edge replication.
fn rotate(img: &Image, radians: f64) -> Image {
    let (h, w, c) = (img.height, img.width, img.channels);
    let (sin, cos) = radians.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, (w - 1) as f64);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for ch in 0..c {
                let top = img.at(y0, x0, ch) * (1.0 - fx) + img.at(y0, x1, ch) * fx;
                let bot = img.at(y1, x0, ch) * (1.0 - fx) + img.at(y1, x1, ch) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Image::new(h, w, c, out)
}
