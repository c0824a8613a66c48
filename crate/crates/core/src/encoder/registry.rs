//! Known encoders, the local weight cache, and weight import from
//! `safetensors` files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use super::params::{ParamStore, Tensor};
use super::tiny::{TinyCnn, TINY_EMBEDDING_DIM, TINY_INPUT_SIDE};
use super::vit::{param_layout, VitConfig, VitFlavor};
use super::{ArchKind, ArchSpec, EncoderFamily, EncoderMeta, VisionEncoder, DEFAULT_LOGIT_SCALE};
use crate::error::{ReidError, Result};
use crate::preprocess::{CLIP_MEAN, CLIP_STD, IMAGENET_MEAN, IMAGENET_STD};

/// Environment variable naming the pretrained weight cache directory.
pub const WEIGHTS_DIR_ENV: &str = "REID_WEIGHTS_DIR";
pub const TINY_NAME: &str = "tiny";

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub name: &'static str,
    pub family: EncoderFamily,
    pub kind: ArchKind,
    pub input_side: usize,
    /// Width of the trunk output (the embedding when the projection is dropped).
    pub trunk_dim: usize,
    /// Width after the image-text projection, if the model has one.
    pub projected_dim: Option<usize>,
    /// `None` for architectures without a native implementation here.
    pub vit: Option<VitConfig>,
}

impl RegistryEntry {
    pub fn embedding_dim(&self, drop_projection: bool) -> usize {
        match (drop_projection, self.projected_dim) {
            (false, Some(d)) => d,
            _ => self.trunk_dim,
        }
    }

    fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        match self.family {
            EncoderFamily::Contrastive => (CLIP_MEAN, CLIP_STD),
            EncoderFamily::Classification => (IMAGENET_MEAN, IMAGENET_STD),
            EncoderFamily::Reference => ([0.5; 3], [0.25; 3]),
        }
    }

    /// File stem used inside the weight cache.
    pub fn file_stem(&self) -> String {
        self.name.replace('/', "-")
    }
}

fn vit(flavor: VitFlavor, patch: usize, width: usize, layers: usize, heads: usize, proj: Option<usize>) -> VitConfig {
    VitConfig {
        flavor,
        image_size: 224,
        patch,
        width,
        layers,
        heads,
        projection_dim: proj,
    }
}

pub fn known_encoders() -> Vec<RegistryEntry> {
    use ArchKind::*;
    use EncoderFamily::*;
    let entry = |name, family, kind, input_side, trunk_dim, projected_dim, vit| RegistryEntry {
        name,
        family,
        kind,
        input_side,
        trunk_dim,
        projected_dim,
        vit,
    };
    vec![
        entry("ViT-B/16", Contrastive, Transformer, 224, 768, Some(512),
              Some(vit(VitFlavor::Contrastive, 16, 768, 12, 12, Some(512)))),
        entry("ViT-L/14", Contrastive, Transformer, 224, 1024, Some(768),
              Some(vit(VitFlavor::Contrastive, 14, 1024, 24, 16, Some(768)))),
        entry("RN50x16", Contrastive, Convolutional, 384, 3072, Some(768), None),
        entry("vit_base_patch16_224", Classification, Transformer, 224, 768, None,
              Some(vit(VitFlavor::Classifier, 16, 768, 12, 12, None))),
        entry("vit_large_patch16_224", Classification, Transformer, 224, 1024, None,
              Some(vit(VitFlavor::Classifier, 16, 1024, 24, 16, None))),
        entry("convnext_base_in22ft1k", Classification, Convolutional, 224, 1024, None, None),
        entry("convnext_large_in22ft1k", Classification, Convolutional, 224, 1536, None, None),
        entry(TINY_NAME, Reference, Convolutional, TINY_INPUT_SIDE, TINY_EMBEDDING_DIM, None, None),
    ]
}

pub fn lookup(name: &str) -> Result<RegistryEntry> {
    let all = known_encoders();
    all.iter()
        .find(|e| e.name == name)
        .cloned()
        .ok_or_else(|| ReidError::UnknownEncoder {
            name: name.to_string(),
            known: all.iter().map(|e| e.name).collect::<Vec<_>>().join(", "),
        })
}

/// Metadata of a registered encoder without touching any weights.
pub fn describe(name: &str, drop_projection: bool) -> Result<EncoderMeta> {
    let e = lookup(name)?;
    let (channel_mean, channel_std) = e.channel_stats();
    let arch = match (&e.vit, e.family) {
        (Some(cfg), _) => ArchSpec::Vit(cfg.clone()),
        (None, EncoderFamily::Reference) => ArchSpec::Tiny,
        (None, _) => {
            return Err(ReidError::Weights(format!(
                "{name} is registered but has no native implementation in this build"
            )))
        }
    };
    Ok(EncoderMeta {
        name: e.name.to_string(),
        family: e.family,
        kind: e.kind,
        arch,
        input_side: e.input_side,
        embedding_dim: e.embedding_dim(drop_projection),
        drop_projection: drop_projection || e.projected_dim.is_none(),
        channel_mean,
        channel_std,
        training_step: 0,
        logit_scale: DEFAULT_LOGIT_SCALE,
    })
}

pub fn weights_dir() -> Option<PathBuf> {
    std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from)
}

/// Tiny seeded CNN, input 32x32, 32-d embeddings.
pub fn reference_tiny_encoder(seed: u64) -> VisionEncoder {
    let (_, store) = TinyCnn::init(seed);
    let meta = describe(TINY_NAME, true).expect("tiny is registered");
    VisionEncoder::from_parts(meta, store).expect("tiny layout")
}

/// Loads a registered pretrained encoder from the weight cache named by
/// `REID_WEIGHTS_DIR`.
pub fn load_pretrained(name: &str, drop_projection: bool) -> Result<VisionEncoder> {
    let entry = lookup(name)?;
    if entry.family == EncoderFamily::Reference {
        return Ok(reference_tiny_encoder(0));
    }
    let dir = weights_dir().ok_or_else(|| {
        ReidError::Weights(format!(
            "{name}: no weight cache configured; set {WEIGHTS_DIR_ENV} to a directory containing {}.safetensors",
            entry.file_stem()
        ))
    })?;
    load_pretrained_from(&dir, name, drop_projection)
}

pub fn load_pretrained_from(dir: &Path, name: &str, drop_projection: bool) -> Result<VisionEncoder> {
    let entry = lookup(name)?;
    let meta = describe(name, drop_projection)?;
    let path = dir.join(format!("{}.safetensors", entry.file_stem()));
    let bytes = std::fs::read(&path).map_err(|e| {
        ReidError::Weights(format!("{name}: missing weights offline ({}: {e})", path.display()))
    })?;
    verify_checksum(&path, &bytes)?;
    let ArchSpec::Vit(cfg) = &meta.arch else {
        unreachable!("pretrained entries with weights are transformers")
    };
    let (store, logit_scale) = import_vit(&bytes, cfg, !meta.drop_projection)?;
    let mut meta = meta;
    if let Some(s) = logit_scale {
        meta.logit_scale = s;
    }
    VisionEncoder::from_parts(meta, store)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Compares against a `<file>.sha256` sidecar when one exists.
fn verify_checksum(path: &Path, bytes: &[u8]) -> Result<()> {
    let sidecar = path.with_extension("sha256");
    match std::fs::read_to_string(&sidecar) {
        Ok(expected) => {
            let expected = expected.split_whitespace().next().unwrap_or("").to_lowercase();
            let actual = sha256_hex(bytes);
            if expected != actual {
                return Err(ReidError::Checksum {
                    what: path.display().to_string(),
                    expected,
                    actual,
                });
            }
            Ok(())
        }
        Err(_) => {
            log::warn!("no checksum sidecar for {}", path.display());
            Ok(())
        }
    }
}

fn to_f64(dtype: Dtype, data: &[u8]) -> Result<Vec<f64>> {
    Ok(match dtype {
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F16 => data
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        Dtype::BF16 => data
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        other => return Err(ReidError::Weights(format!("unsupported tensor dtype {other:?}"))),
    })
}

/// Maps a checkpoint key onto the internal naming, or `None` to ignore it.
fn internal_name(key: &str, flavor: VitFlavor) -> Option<String> {
    match flavor {
        VitFlavor::Contrastive => key.strip_prefix("visual.").map(str::to_string),
        VitFlavor::Classifier => {
            let fixed = match key {
                "cls_token" => return Some("class_embedding".into()),
                "pos_embed" => return Some("positional_embedding".into()),
                "patch_embed.proj.weight" => return Some("conv1.weight".into()),
                "patch_embed.proj.bias" => return Some("conv1.bias".into()),
                "norm.weight" => return Some("ln_post.weight".into()),
                "norm.bias" => return Some("ln_post.bias".into()),
                k => k,
            };
            let rest = fixed.strip_prefix("blocks.")?;
            let (idx, tail) = rest.split_once('.')?;
            let tail = match tail {
                "norm1.weight" => "ln_1.weight",
                "norm1.bias" => "ln_1.bias",
                "norm2.weight" => "ln_2.weight",
                "norm2.bias" => "ln_2.bias",
                "attn.qkv.weight" => "attn.in_proj_weight",
                "attn.qkv.bias" => "attn.in_proj_bias",
                "attn.proj.weight" => "attn.out_proj.weight",
                "attn.proj.bias" => "attn.out_proj.bias",
                "mlp.fc1.weight" => "mlp.c_fc.weight",
                "mlp.fc1.bias" => "mlp.c_fc.bias",
                "mlp.fc2.weight" => "mlp.c_proj.weight",
                "mlp.fc2.bias" => "mlp.c_proj.bias",
                _ => return None,
            };
            Some(format!("transformer.resblocks.{idx}.{tail}"))
        }
    }
}

/// Builds a parameter store from `safetensors` bytes in either the
/// contrastive (`visual.*`) or the classifier (`blocks.*`) key layout.
/// Returns the store and the learned inverse temperature, when present.
pub fn import_vit(bytes: &[u8], cfg: &VitConfig, with_projection: bool) -> Result<(ParamStore, Option<f64>)> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| ReidError::Weights(e.to_string()))?;
    let mut found: HashMap<String, Vec<f64>> = HashMap::new();
    let mut logit_scale = None;
    for (key, view) in st.tensors() {
        if key == "logit_scale" {
            let v = to_f64(view.dtype(), view.data())?;
            logit_scale = v.first().map(|s| s.exp());
            continue;
        }
        if let Some(name) = internal_name(&key, cfg.flavor) {
            found.insert(name, to_f64(view.dtype(), view.data())?);
        }
    }
    let mut store = ParamStore::new();
    for (name, shape) in param_layout(cfg, with_projection) {
        let data = found
            .remove(&name)
            .ok_or_else(|| ReidError::Weights(format!("checkpoint lacks `{name}`")))?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(ReidError::Shape(format!(
                "`{name}` has {} values, expected {expected} for shape {shape:?}",
                data.len()
            )));
        }
        store.add(name, Tensor::new(shape, data));
    }
    Ok((store, logit_scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropped_projection_widths() {
        assert_eq!(describe("ViT-B/16", true).unwrap().embedding_dim, 768);
        assert_eq!(describe("ViT-L/14", true).unwrap().embedding_dim, 1024);
        assert_eq!(describe("ViT-B/16", false).unwrap().embedding_dim, 512);
        assert_eq!(describe("ViT-L/14", false).unwrap().embedding_dim, 768);
        assert_eq!(describe("vit_large_patch16_224", true).unwrap().embedding_dim, 1024);
        for e in known_encoders() {
            assert!(e.embedding_dim(true) >= e.embedding_dim(false));
        }
    }

    #[test]
    fn unknown_name_lists_known() {
        let err = load_pretrained("foo", true).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("foo") && msg.contains("ViT-L/14") && msg.contains("tiny"), "{msg}");
    }

    #[test]
    fn missing_weights_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_pretrained_from(dir.path(), "ViT-B/16", true).unwrap_err();
        assert!(err.to_string().contains("missing weights offline"), "{err}");
        let err = load_pretrained_from(dir.path(), "convnext_base_in22ft1k", true).unwrap_err();
        assert!(err.to_string().contains("no native implementation"), "{err}");
    }

    #[test]
    fn classifier_keys_map() {
        assert_eq!(
            internal_name("blocks.3.attn.qkv.weight", VitFlavor::Classifier).as_deref(),
            Some("transformer.resblocks.3.attn.in_proj_weight")
        );
        assert_eq!(internal_name("head.weight", VitFlavor::Classifier), None);
        assert_eq!(
            internal_name("visual.ln_post.bias", VitFlavor::Contrastive).as_deref(),
            Some("ln_post.bias")
        );
        assert_eq!(internal_name("token_embedding.weight", VitFlavor::Contrastive), None);
    }
}
