//! Aspect-preserving preprocessing: centre zero-padding to a square, bilinear
//! resize, optional horizontal flip and per-channel standardisation.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};

/// Channel statistics of the contrastive image-text towers.
pub const CLIP_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
pub const CLIP_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];
/// Channel statistics of ImageNet-pretrained backbones.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// RGB image with values in `[0, 1]`, row-major `H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PixelImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ReidError::Invalid("image dimensions must be positive".into()));
        }
        if data.len() != height * width * 3 {
            return Err(ReidError::Shape(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ReidError::Invalid(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data).expect("valid fill")
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    /// Multiplies every channel by a per-pixel mask of the same spatial size.
    pub fn masked(&self, mask: &[f64]) -> Self {
        assert_eq!(mask.len(), self.height * self.width, "mask size");
        let data = self
            .data
            .chunks_exact(3)
            .zip(mask)
            .flat_map(|(px, m)| px.iter().map(move |v| v * m))
            .collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

pub fn load_image(path: &Path) -> Result<PixelImage> {
    let img = image::open(path).map_err(|e| ReidError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(PixelImage::from_rgb8(&img.to_rgb8()))
}

/// Standardised encoder input, `H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    pub flip_probability: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 224,
            channel_mean: CLIP_MEAN,
            channel_std: CLIP_STD,
            flip_probability: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(ReidError::Config("target_size must be positive".into()));
        }
        if self.channel_std.iter().any(|s| !(*s > 0.0)) {
            return Err(ReidError::Config("channel_std must be strictly positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(ReidError::Config("flip_probability must be in [0,1]".into()));
        }
        Ok(())
    }

    /// Pad + resize, no augmentation.
    pub fn fit(&self, img: &PixelImage) -> PixelImage {
        let square = zero_pad_to_square(img);
        if square.height == self.target_size {
            square
        } else {
            resize_bilinear(&square, self.target_size).expect("target_size validated")
        }
    }

    /// Full evaluation path: pad, resize, normalise. Deterministic.
    pub fn prepare(&self, img: &PixelImage) -> NormalizedImage {
        normalize(&self.fit(img), self)
    }

    /// Training path: as [`prepare`](Self::prepare) plus a random flip.
    pub fn prepare_augmented<R: Rng + ?Sized>(&self, img: &PixelImage, rng: &mut R) -> NormalizedImage {
        let fitted = self.fit(img);
        normalize(&horizontal_flip(&fitted, self.flip_probability, rng), self)
    }
}

/// Centres the image on a black square of side `max(H, W)`. Odd padding puts
/// the smaller half first.
pub fn zero_pad_to_square(img: &PixelImage) -> PixelImage {
    let side = img.height.max(img.width);
    if img.height == img.width {
        return img.clone();
    }
    let top = (side - img.height) / 2;
    let left = (side - img.width) / 2;
    let mut data = vec![0.0; side * side * 3];
    for y in 0..img.height {
        let src = &img.data[y * img.width * 3..(y + 1) * img.width * 3];
        let start = ((y + top) * side + left) * 3;
        data[start..start + src.len()].copy_from_slice(src);
    }
    PixelImage {
        height: side,
        width: side,
        data,
    }
}

/// Bilinear resampling to `side x side` with half-pixel centres and edge
/// clamping.
pub fn resize_bilinear(img: &PixelImage, side: usize) -> Result<PixelImage> {
    if side < 1 {
        return Err(ReidError::Invalid("resize side must be at least 1".into()));
    }
    let data = resize_channels(&img.data, img.height, img.width, 3, side, side);
    Ok(PixelImage {
        height: side,
        width: side,
        data,
    })
}

/// Bilinear resize of an interleaved `h x w x channels` buffer.
pub fn resize_channels(
    src: &[f64],
    h: usize,
    w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let mut out = vec![0.0; out_h * out_w * channels];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..channels {
                let p = |y: usize, x: usize| src[(y * w + x) * channels + c];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(oy * out_w + ox) * channels + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Reverses columns with probability `p`.
pub fn horizontal_flip<R: Rng + ?Sized>(img: &PixelImage, p: f64, rng: &mut R) -> PixelImage {
    let p = p.clamp(0.0, 1.0);
    if p == 0.0 || !rng.random_bool(p) {
        return img.clone();
    }
    mirror(img)
}

pub fn mirror(img: &PixelImage) -> PixelImage {
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            let i = (y * img.width + x) * 3;
            data.extend_from_slice(&img.data[i..i + 3]);
        }
    }
    PixelImage {
        height: img.height,
        width: img.width,
        data,
    }
}

pub fn normalize(img: &PixelImage, cfg: &PreprocessConfig) -> NormalizedImage {
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|px| (0..3).map(move |c| (px[c] - cfg.channel_mean[c]) / cfg.channel_std[c]))
        .collect();
    NormalizedImage {
        height: img.height,
        width: img.width,
        data,
    }
}
