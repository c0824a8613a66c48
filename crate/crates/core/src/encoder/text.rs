//! Text-prompt embeddings for zero-shot probing.
//!
//! The text tower itself is not part of this crate. Prompt embeddings are
//! exported once from the paired text encoder into a JSON prompt table and
//! served from there.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{l2_normalize, EncoderFamily, EncoderMeta};
use crate::error::{ReidError, Result};

pub trait TextEmbeddingProvider: Sync {
    /// Name of the vision tower whose joint space these embeddings live in.
    fn encoder_name(&self) -> &str;

    fn dim(&self) -> usize;

    /// Unit-norm embedding of `text`.
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTable {
    pub encoder: String,
    pub dim: usize,
    pub prompts: HashMap<String, Vec<f64>>,
}

impl PromptTable {
    pub fn new(encoder: impl Into<String>, dim: usize, prompts: HashMap<String, Vec<f64>>) -> Result<Self> {
        let mut prompts = prompts;
        for (k, v) in prompts.iter_mut() {
            if v.len() != dim {
                return Err(ReidError::Shape(format!(
                    "prompt `{k}` has {} values, table dim is {dim}",
                    v.len()
                )));
            }
            l2_normalize(v)?;
        }
        Ok(Self {
            encoder: encoder.into(),
            dim,
            prompts,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ReidError::io(path, e))?;
        let raw: PromptTable = serde_json::from_str(&text)?;
        Self::new(raw.encoder, raw.dim, raw.prompts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| ReidError::io(path, e))
    }
}

impl TextEmbeddingProvider for PromptTable {
    fn encoder_name(&self) -> &str {
        &self.encoder
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.prompts
            .get(text)
            .cloned()
            .ok_or_else(|| ReidError::Invalid(format!("prompt table has no entry for `{text}`")))
    }
}

/// Refuses to pair prompts with a vision tower that no longer shares the
/// image-text space: fine-tuned weights, a dropped projection, a non-
/// contrastive backbone, or a table exported for a different tower.
pub fn check_joint_space(meta: &EncoderMeta, provider: &dyn TextEmbeddingProvider) -> Result<()> {
    if meta.training_step > 0 {
        return Err(ReidError::JointSpace(format!(
            "{} has been fine-tuned ({} steps); its embeddings no longer match the text encoder",
            meta.name, meta.training_step
        )));
    }
    if meta.family != EncoderFamily::Contrastive {
        return Err(ReidError::JointSpace(format!(
            "{} is not an image-text contrastive tower",
            meta.name
        )));
    }
    if meta.drop_projection {
        return Err(ReidError::JointSpace(format!(
            "{} was loaded without its projection layer",
            meta.name
        )));
    }
    if provider.encoder_name() != meta.name {
        return Err(ReidError::JointSpace(format!(
            "prompt table was exported for {}, not {}",
            provider.encoder_name(),
            meta.name
        )));
    }
    if provider.dim() != meta.embedding_dim {
        return Err(ReidError::Shape(format!(
            "text embeddings are {}-d but image embeddings are {}-d",
            provider.dim(),
            meta.embedding_dim
        )));
    }
    Ok(())
}
