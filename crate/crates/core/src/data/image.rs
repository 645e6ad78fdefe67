use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// An image with values in `[0, 1]`, stored row-major as `H × W × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), height * width * channels, "pixel buffer size");
        Self { height, width, channels, pixels }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Luma for 3-channel input, replication for 1 → 3.
    pub fn with_channels(&self, channels: usize) -> Image {
        if channels == self.channels {
            return self.clone();
        }
        let mut out = Vec::with_capacity(self.height * self.width * channels);
        for px in self.pixels.chunks_exact(self.channels) {
            match (self.channels, channels) {
                (3, 1) => out.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]),
                (1, 3) => out.extend_from_slice(&[px[0]; 3]),
                (a, b) => panic!("unsupported channel conversion {a} -> {b}"),
            }
        }
        Image::new(self.height, self.width, channels, out)
    }

    /// Stretch-resizes to exactly `height × width`: box filtering when shrinking an
    /// axis, linear interpolation when growing it.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let wy = axis_weights(self.height, height);
        let wx = axis_weights(self.width, width);
        let c = self.channels;
        let mut rows = vec![0.0f32; height * self.width * c];
        for (oy, taps) in wy.iter().enumerate() {
            for &(sy, w) in taps {
                let src = &self.pixels[sy * self.width * c..(sy + 1) * self.width * c];
                let dst = &mut rows[oy * self.width * c..(oy + 1) * self.width * c];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
            }
        }
        let mut out = vec![0.0f32; height * width * c];
        for oy in 0..height {
            for (ox, taps) in wx.iter().enumerate() {
                for &(sx, w) in taps {
                    for ch in 0..c {
                        out[(oy * width + ox) * c + ch] += w * rows[(oy * self.width + sx) * c + ch];
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Image::new(height, width, c, out)
    }

    pub fn clamp(&mut self) {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            if scale > 1.0 {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut s = lo.floor() as usize;
                while (s as f64) < hi && s < src {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((s, (overlap / scale) as f32));
                    }
                    s += 1;
                }
                taps
            } else {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                let f = (pos - i0 as f64) as f32;
                if i1 == i0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - f), (i1, f)]
                }
            }
        })
        .collect()
}

/// Reads binary PGM (`P5`) or PPM (`P6`) with 8-bit samples.
pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes).map_err(|msg| Error::Image { file: path.to_path_buf(), msg })
}

pub fn parse_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic {other:?} (expected P5 or P6)")),
    };
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
    let width = num(&fields[1], "width")?;
    let height = num(&fields[2], "height")?;
    let maxval = num(&fields[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err("zero-sized image".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} unsupported (8-bit only)"));
    }
    let need = width * height * channels;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| format!("raster has {} bytes, need {need}", bytes.len().saturating_sub(pos)))?;
    let pixels = raster.iter().map(|&b| (b as f32 / maxval as f32).min(1.0)).collect();
    Ok(Image::new(height, width, channels, pixels))
}

pub fn write_pnm(path: &Path, image: &Image) -> Result<()> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Usage(format!("cannot write a {c}-channel image as PNM"))),
    };
    let mut buf = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    buf.extend(image.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
