//! Score-CAM saliency for prompt targets and image-similarity targets.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::MAX_JERSEY_NUMBER;
use crate::encoder::text::{check_joint_space, TextEmbeddingProvider};
use crate::encoder::{l2_normalize, VisionEncoder, VisionTower};
use crate::error::{ReidError, Result};
use crate::par;
use crate::preprocess::{resize_bilinear, resize_channels, zero_pad_to_square, PixelImage};

pub const LOCALISATION_TEMPLATE: &str = "jersey number {c}, text number {c}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    ZeroImage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreCamConfig {
    pub layer_tag: String,
    pub batch_chunk: usize,
    pub baseline: Baseline,
}

impl ScoreCamConfig {
    pub fn new(layer_tag: impl Into<String>) -> Self {
        Self {
            layer_tag: layer_tag.into(),
            batch_chunk: 32,
            baseline: Baseline::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_chunk == 0 {
            return Err(ReidError::Config("batch_chunk must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    /// `H x W` saliency in `[0, 1]`, aligned with the explained image.
    pub values: Array2<f64>,
    pub source_layer: String,
    pub target_descriptor: String,
    /// Score of each masked image, in activation-map order.
    pub scores: Vec<f64>,
    /// Softmax weights of the maps; they sum to 1.
    pub weights: Vec<f64>,
    pub baseline_score: Option<f64>,
}

/// `[0,1]` rescaling. A constant input maps to ones when positive, zeros otherwise.
pub fn min_max(a: &Array2<f64>) -> Array2<f64> {
    let lo = a.fold(f64::INFINITY, |m, &v| m.min(v));
    let hi = a.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if hi > lo {
        a.mapv(|v| (v - lo) / (hi - lo))
    } else if hi > 0.0 {
        a.mapv(|v| v / hi)
    } else {
        Array2::zeros(a.raw_dim())
    }
}

pub fn upsample(map: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (mh, mw) = map.dim();
    let src: Vec<f64> = map.iter().copied().collect();
    Array2::from_shape_vec((h, w), resize_channels(&src, mh, mw, 1, h, w)).expect("sized")
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn fit_square(img: &PixelImage, side: usize) -> Result<PixelImage> {
    let sq = zero_pad_to_square(img);
    if sq.height() == side {
        Ok(sq)
    } else {
        resize_bilinear(&sq, side)
    }
}

/// Maps a saliency computed on the padded square input back onto the
/// original `h x w` image.
fn unfit(cam: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let s = h.max(w);
    let full = if cam.nrows() == s { cam.clone() } else { upsample(cam, s, s) };
    let (top, left) = ((s - h) / 2, (s - w) / 2);
    if (top, left) == (0, 0) && h == s && w == s {
        return full;
    }
    min_max(&full.slice(ndarray::s![top..top + h, left..left + w]).to_owned())
}

/// Score-CAM over `layer_tag`. `target` maps a unit embedding to a score.
pub fn score_cam<T, F>(tower: &T, image: &PixelImage, descriptor: &str, target: F, cfg: &ScoreCamConfig) -> Result<CamMap>
where
    T: VisionTower + ?Sized,
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let side = tower.input_side();
    let fitted = fit_square(image, side)?;
    let maps = tower.activation_maps_for(&fitted, &cfg.layer_tag)?;
    if maps.is_empty() {
        return Err(ReidError::Invalid(format!("layer {} produced no activation maps", cfg.layer_tag)));
    }
    let masks: Vec<Array2<f64>> = par::map_slice(&maps, |m| upsample(&min_max(m), side, side));

    let chunks: Vec<&[Array2<f64>]> = masks.chunks(cfg.batch_chunk).collect();
    let scored = par::try_map_slice(&chunks, |chunk| -> Result<Vec<f64>> {
        chunk
            .iter()
            .map(|mask| {
                let flat: Vec<f64> = mask.iter().copied().collect();
                target(&tower.embed_pixels(&fitted.masked(&flat))?)
            })
            .collect()
    })?;
    let scores: Vec<f64> = scored.into_iter().flatten().collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(ReidError::Numerical("non-finite Score-CAM score".into()));
    }

    let baseline_score = match cfg.baseline {
        Baseline::None => None,
        Baseline::ZeroImage => {
            let black = PixelImage::filled(side, side, [0.0; 3]);
            Some(match tower.embed_pixels(&black) {
                Ok(e) => target(&e)?,
                // An all-black input has no direction for towers without biases.
                Err(ReidError::Numerical(_)) => 0.0,
                Err(e) => return Err(e),
            })
        }
    };
    let shifted: Vec<f64> = scores.iter().map(|s| s - baseline_score.unwrap_or(0.0)).collect();
    let weights = softmax(&shifted);

    let mut cam = Array2::<f64>::zeros((side, side));
    for (w, m) in weights.iter().zip(&masks) {
        cam.scaled_add(*w, m);
    }
    cam.mapv_inplace(|v| v.max(0.0));
    let cam = min_max(&cam);
    Ok(CamMap {
        values: unfit(&cam, image.height(), image.width()),
        source_layer: cfg.layer_tag.clone(),
        target_descriptor: descriptor.to_string(),
        scores,
        weights,
        baseline_score,
    })
}

fn cosine_target(reference: Vec<f64>) -> impl Fn(&[f64]) -> Result<f64> + Sync {
    move |e: &[f64]| {
        if e.len() != reference.len() {
            return Err(ReidError::Shape(format!(
                "target embedding is {}-d, image embedding {}-d",
                reference.len(),
                e.len()
            )));
        }
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Ok(0.0);
        }
        Ok(e.iter().zip(&reference).map(|(a, b)| a * b).sum::<f64>() / n)
    }
}

/// Score-CAM towards an embedded text prompt.
pub fn localise_prompt<T: VisionTower + ?Sized>(
    tower: &T,
    txt: &dyn TextEmbeddingProvider,
    prompt: &str,
    image: &PixelImage,
    cfg: &ScoreCamConfig,
) -> Result<CamMap> {
    let mut p = txt.embed(prompt)?;
    l2_normalize(&mut p)?;
    score_cam(tower, image, prompt, cosine_target(p), cfg)
}

pub fn number_prompt(c: u32) -> Result<String> {
    if !(1..=MAX_JERSEY_NUMBER).contains(&c) {
        return Err(ReidError::Invalid(format!(
            "jersey number {c} outside 1..={MAX_JERSEY_NUMBER}"
        )));
    }
    Ok(LOCALISATION_TEMPLATE.replace("{c}", &c.to_string()))
}

/// Where on the crop the tower sees jersey number `c`. Needs the untouched
/// contrastive tower with its projection.
pub fn localise_number(
    enc: &VisionEncoder,
    txt: &dyn TextEmbeddingProvider,
    image: &PixelImage,
    c: u32,
    cfg: &ScoreCamConfig,
) -> Result<CamMap> {
    let prompt = number_prompt(c)?;
    check_joint_space(enc.meta(), txt)?;
    localise_prompt(enc, txt, &prompt, image, cfg)
}

/// Regions of `gallery` that drive its similarity to `query`.
pub fn similarity_cam<T: VisionTower + ?Sized>(
    tower: &T,
    query: &PixelImage,
    gallery: &PixelImage,
    query_descriptor: &str,
    cfg: &ScoreCamConfig,
) -> Result<CamMap> {
    let q = tower.embed_pixels(query)?;
    score_cam(tower, gallery, query_descriptor, cosine_target(q), cfg)
}

#[derive(Debug, Clone, Serialize)]
struct CamMetadata<'a> {
    source_layer: &'a str,
    target_descriptor: &'a str,
    height: usize,
    width: usize,
    scores: &'a [f64],
    weights: &'a [f64],
    baseline_score: Option<f64>,
    config_hash: Option<&'a str>,
    values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamFiles {
    pub map_png: PathBuf,
    pub overlay_png: Option<PathBuf>,
    pub metadata_json: PathBuf,
}

fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [(1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0), (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0), (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0)]
}

impl CamMap {
    pub fn overlay(&self, image: &PixelImage, alpha: f64) -> Result<PixelImage> {
        let (h, w) = self.values.dim();
        if image.height() != h || image.width() != w {
            return Err(ReidError::Shape(format!(
                "map is {h}x{w}, image is {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(PixelImage::from_fn(h, w, |y, x, c| {
            (1.0 - alpha) * image.at(y, x, c) + alpha * heat(self.values[[y, x]])[c]
        }))
    }

    /// Writes `<stem>.png` (grayscale map), `<stem>.json` (metadata and raw
    /// values) and, with a source image, `<stem>-overlay.png`.
    pub fn save(&self, dir: &Path, stem: &str, source: Option<&PixelImage>, config_hash: Option<&str>) -> Result<CamFiles> {
        std::fs::create_dir_all(dir).map_err(|e| ReidError::io(dir, e))?;
        let (h, w) = self.values.dim();
        let gray = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([(self.values[[y as usize, x as usize]] * 255.0).round() as u8])
        });
        let map_png = dir.join(format!("{stem}.png"));
        let img_err = |p: &Path, e: image::ImageError| ReidError::Image {
            path: p.to_path_buf(),
            message: e.to_string(),
        };
        gray.save(&map_png).map_err(|e| img_err(&map_png, e))?;
        let overlay_png = match source {
            Some(src) => {
                let p = dir.join(format!("{stem}-overlay.png"));
                self.overlay(src, 0.5)?.to_rgb8().save(&p).map_err(|e| img_err(&p, e))?;
                Some(p)
            }
            None => None,
        };
        let meta = CamMetadata {
            source_layer: &self.source_layer,
            target_descriptor: &self.target_descriptor,
            height: h,
            width: w,
            scores: &self.scores,
            weights: &self.weights,
            baseline_score: self.baseline_score,
            config_hash,
            values: self.values.rows().into_iter().map(|r| r.to_vec()).collect(),
        };
        let metadata_json = dir.join(format!("{stem}.json"));
        std::fs::write(&metadata_json, serde_json::to_vec_pretty(&meta)?).map_err(|e| ReidError::io(&metadata_json, e))?;
        Ok(CamFiles {
            map_png,
            overlay_png,
            metadata_json,
        })
    }
}
