//! Uniform encoder abstraction over the pretrained transformer towers and
//! the tiny reference CNN.

pub mod checkpoint;
pub mod ops;
pub mod params;
pub mod registry;
pub mod text;
pub mod tiny;
pub mod vit;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::par;
use crate::preprocess::{NormalizedImage, PixelImage, PreprocessConfig};
use params::{Grads, ParamStore};
use tiny::TinyCnn;
use vit::{Vit, VitConfig};

pub use registry::{load_pretrained, reference_tiny_encoder};

/// Default inverse temperature for backbones without a learned one.
pub const DEFAULT_LOGIT_SCALE: f64 = 1.0 / 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    /// Image tower of a contrastive image-text model.
    Contrastive,
    /// ImageNet classification backbone.
    Classification,
    /// Seeded desk-scale test double.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Convolutional,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ArchSpec {
    Tiny,
    Vit(VitConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub name: String,
    pub family: EncoderFamily,
    pub kind: ArchKind,
    pub arch: ArchSpec,
    pub input_side: usize,
    pub embedding_dim: usize,
    pub drop_projection: bool,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    /// Optimizer steps applied since the pretrained weights; 0 = untouched.
    pub training_step: u64,
    /// Inverse temperature carried by the checkpoint.
    pub logit_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Architecture {
    Tiny(TinyCnn),
    Vit(Vit),
}

/// A vision encoder with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    meta: EncoderMeta,
    params: ParamStore,
    arch: Architecture,
}

impl VisionEncoder {
    pub(crate) fn from_parts(meta: EncoderMeta, params: ParamStore) -> Result<Self> {
        let arch = match &meta.arch {
            ArchSpec::Tiny => Architecture::Tiny(
                TinyCnn::bind(&params)
                    .ok_or_else(|| ReidError::Weights("tiny encoder parameters incomplete".into()))?,
            ),
            ArchSpec::Vit(cfg) => Architecture::Vit(
                Vit::bind(cfg.clone(), &params)
                    .ok_or_else(|| ReidError::Weights(format!("{}: transformer parameters incomplete", meta.name)))?,
            ),
        };
        let out_dim = match &arch {
            Architecture::Tiny(_) => tiny::TINY_EMBEDDING_DIM,
            Architecture::Vit(v) => v.output_dim(),
        };
        if out_dim != meta.embedding_dim {
            return Err(ReidError::Shape(format!(
                "{}: weights produce {out_dim}-d embeddings, metadata says {}",
                meta.name, meta.embedding_dim
            )));
        }
        Ok(Self { meta, params, arch })
    }

    pub fn meta(&self) -> &EncoderMeta {
        &self.meta
    }

    pub fn name(&self) -> &str {
        &self.meta.name
    }

    pub fn input_side(&self) -> usize {
        self.meta.input_side
    }

    pub fn embedding_dim(&self) -> usize {
        self.meta.embedding_dim
    }

    pub fn is_fine_tuned(&self) -> bool {
        self.meta.training_step > 0
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn meta_mut(&mut self) -> &mut EncoderMeta {
        &mut self.meta
    }

    pub fn layer_tags(&self) -> Vec<String> {
        match &self.arch {
            Architecture::Tiny(_) => TinyCnn::layer_tags(),
            Architecture::Vit(v) => v.cfg.layer_tags(),
        }
    }

    /// Evaluation preprocessing matching this encoder's input statistics.
    pub fn preprocess_config(&self, flip_probability: f64) -> PreprocessConfig {
        PreprocessConfig {
            target_size: self.meta.input_side,
            channel_mean: self.meta.channel_mean,
            channel_std: self.meta.channel_std,
            flip_probability,
        }
    }

    fn check_input(&self, x: &NormalizedImage) -> Result<()> {
        let s = self.meta.input_side;
        if x.height != s || x.width != s || x.data.len() != s * s * 3 {
            return Err(ReidError::Shape(format!(
                "{} expects {s}x{s} inputs, got {}x{}",
                self.meta.name, x.height, x.width
            )));
        }
        Ok(())
    }

    /// Un-normalised embedding.
    pub fn embed_raw(&self, x: &NormalizedImage) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(match &self.arch {
            Architecture::Tiny(t) => t.forward(&self.params, x),
            Architecture::Vit(v) => v.forward(&self.params, x),
        })
    }

    /// Accumulates `d_out · ∂embed_raw(x)/∂θ` into `grads`. Recomputes the
    /// forward pass, so only one image's activations are alive at a time.
    pub fn backward_raw(&self, x: &NormalizedImage, d_out: &[f64], grads: &mut Grads) -> Result<()> {
        self.check_input(x)?;
        if d_out.len() != self.meta.embedding_dim {
            return Err(ReidError::Shape("embedding gradient width".into()));
        }
        match &self.arch {
            Architecture::Tiny(t) => t.backward(&self.params, x, d_out, grads),
            Architecture::Vit(v) => v.backward(&self.params, x, d_out, grads),
        }
        Ok(())
    }

    /// Encodes a batch and L2-normalises every row. Rows follow `ids`.
    pub fn encode_normalized(&self, batch: &[NormalizedImage], ids: &[String]) -> Result<EmbeddingMatrix> {
        if batch.len() != ids.len() {
            return Err(ReidError::Shape(format!(
                "{} images but {} ids",
                batch.len(),
                ids.len()
            )));
        }
        let rows = par::try_map_slice(batch, |x| self.embed_raw(x))?;
        EmbeddingMatrix::from_raw_rows(ids.to_vec(), rows)
    }

    pub fn activation_maps(&self, x: &NormalizedImage, layer_tag: &str) -> Result<Vec<Array2<f64>>> {
        self.check_input(x)?;
        let maps = match &self.arch {
            Architecture::Tiny(t) => t.activation_maps(&self.params, x, layer_tag),
            Architecture::Vit(v) => v.activation_maps(&self.params, x, layer_tag),
        };
        maps.ok_or_else(|| ReidError::UnknownLayer {
            tag: layer_tag.to_string(),
            valid: self.layer_tags().join(", "),
        })
    }
}

/// Anything that can embed a pixel image and expose spatial activation maps.
/// Score-CAM is written against this trait.
pub trait VisionTower: Sync {
    fn input_side(&self) -> usize;

    /// Unit-norm embedding of a pixel image of side `input_side`.
    fn embed_pixels(&self, img: &PixelImage) -> Result<Vec<f64>>;

    fn activation_maps_for(&self, img: &PixelImage, layer_tag: &str) -> Result<Vec<Array2<f64>>>;
}

impl VisionTower for VisionEncoder {
    fn input_side(&self) -> usize {
        self.meta.input_side
    }

    fn embed_pixels(&self, img: &PixelImage) -> Result<Vec<f64>> {
        let x = self.preprocess_config(0.0).prepare(img);
        let mut e = self.embed_raw(&x)?;
        l2_normalize(&mut e)?;
        Ok(e)
    }

    fn activation_maps_for(&self, img: &PixelImage, layer_tag: &str) -> Result<Vec<Array2<f64>>> {
        let x = self.preprocess_config(0.0).prepare(img);
        self.activation_maps(&x, layer_tag)
    }
}

pub fn l2_normalize(v: &mut [f64]) -> Result<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(ReidError::Numerical(format!("cannot normalise a vector with norm {n}")));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(n)
}

/// Gradient of `u = v / |v|` pulled back to `v`: `(g - u (u·g)) / |v|`.
pub fn l2_normalize_backward(unit: ArrayView1<f64>, norm: f64, grad_unit: ArrayView1<f64>) -> Vec<f64> {
    let dot = unit.dot(&grad_unit);
    unit.iter()
        .zip(grad_unit.iter())
        .map(|(u, g)| (g - u * dot) / norm)
        .collect()
}

/// `N x D` embeddings keyed by record id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub vectors: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if ids.len() != vectors.nrows() {
            return Err(ReidError::Shape(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                vectors.nrows()
            )));
        }
        Ok(Self { ids, vectors })
    }

    /// Normalises each raw row to unit length.
    pub fn from_raw_rows(ids: Vec<String>, mut rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        for r in rows.iter_mut() {
            if r.len() != d {
                return Err(ReidError::Shape("ragged embedding rows".into()));
            }
            l2_normalize(r)?;
        }
        let n = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(ids, Array2::from_shape_vec((n, d), flat).expect("rectangular"))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_unit_norm(&self, tol: f64) -> bool {
        self.vectors
            .rows()
            .into_iter()
            .all(|r| (r.dot(&r).sqrt() - 1.0).abs() <= tol)
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            vectors: self.vectors.select(ndarray::Axis(0), rows),
        }
    }
}
