//! In-memory cache of padded and resized record images.

use std::collections::HashMap;

use crate::data::ImageRecord;
use crate::error::{ReidError, Result};
use crate::par;
use crate::preprocess::{load_image, PixelImage, PreprocessConfig};

/// Record images after pad + resize, keyed by record id. Flip and
/// normalisation stay per-use so augmentation remains cheap.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    side: usize,
    images: HashMap<String, PixelImage>,
}

impl ImageStore {
    pub fn new(side: usize) -> Self {
        Self {
            side,
            images: HashMap::new(),
        }
    }

    /// Loads every record image from disk in parallel.
    pub fn load<'a>(records: impl IntoIterator<Item = &'a ImageRecord>, cfg: &PreprocessConfig) -> Result<Self> {
        cfg.validate()?;
        let recs: Vec<&ImageRecord> = records.into_iter().collect();
        let loaded = par::try_map_slice(&recs, |r| -> Result<(String, PixelImage)> {
            let img = load_image(&r.image_path)?;
            if img.height() != r.height_px as usize || img.width() != r.width_px as usize {
                log::debug!(
                    "{}: manifest says {}x{}, file is {}x{}",
                    r.record_id,
                    r.height_px,
                    r.width_px,
                    img.height(),
                    img.width()
                );
            }
            Ok((r.record_id.clone(), cfg.fit(&img)))
        })?;
        let mut store = Self::new(cfg.target_size);
        store.images.extend(loaded);
        Ok(store)
    }

    /// Adds an already decoded image, fitting it to the store's side.
    pub fn insert(&mut self, record_id: impl Into<String>, img: &PixelImage, cfg: &PreprocessConfig) {
        self.images.insert(record_id.into(), cfg.fit(img));
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, record_id: &str) -> Result<&PixelImage> {
        self.images
            .get(record_id)
            .ok_or_else(|| ReidError::Invalid(format!("no image loaded for record `{record_id}`")))
    }
}
