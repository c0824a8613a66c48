//! Synthetic colour-coded player corpus for offline runs.
//!
//! Every identity wears a jersey and shorts in its own colour pair. Images
//! differ by position jitter, crop size and pixel noise, so identities are
//! separable by construction but no two images are identical.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, DatasetSplit, ImageRecord, Role, SplitName};
use crate::error::{ReidError, Result};
use crate::par;
use crate::preprocess::PixelImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub identities: usize,
    pub train_gallery_per_identity: usize,
    pub test_gallery_per_identity: usize,
    pub height: usize,
    pub width: usize,
    /// Maximum shift of the figure in pixels.
    pub jitter: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 64,
            train_gallery_per_identity: 4,
            test_gallery_per_identity: 2,
            height: 48,
            width: 24,
            jitter: 2,
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(ReidError::Config("need at least 2 identities".into()));
        }
        if self.train_gallery_per_identity == 0 || self.test_gallery_per_identity == 0 {
            return Err(ReidError::Config("need at least one gallery image per identity".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(ReidError::Config("images must be at least 8x8".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(ReidError::Config("noise must be nonnegative".into()));
        }
        Ok(())
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Jersey and shorts colours of identity `i`.
pub fn identity_colours(i: usize, n: usize) -> ([f64; 3], [f64; 3]) {
    let hue = i as f64 / n as f64;
    let sat = if i % 2 == 0 { 0.95 } else { 0.6 };
    let val = if (i / 2) % 2 == 0 { 0.95 } else { 0.65 };
    (hsv(hue, sat, val), hsv(hue + 0.5, 0.8, 0.4 + 0.5 * ((i / 4) % 2) as f64))
}

/// One rendered crop of identity `i`.
pub fn render(cfg: &SynthConfig, i: usize, rng: &mut ChaCha8Rng) -> PixelImage {
    let (jersey, shorts) = identity_colours(i, cfg.identities);
    let j = cfg.jitter as i64;
    let dy = rng.random_range(-j..=j);
    let dx = rng.random_range(-j..=j);
    let h = cfg.height as i64;
    let w = cfg.width as i64;
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("finite std");
    let field = [0.45, 0.35, 0.25];
    let skin = [0.8, 0.6, 0.45];
    let mut data = Vec::with_capacity((h * w * 3) as usize);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y - dy, x - dx);
            let inside_x = fx >= w / 5 && fx < w - w / 5;
            let px = if !inside_x {
                field
            } else if fy < h / 6 {
                skin
            } else if fy < h * 3 / 5 {
                jersey
            } else if fy < h * 4 / 5 {
                shorts
            } else {
                field
            };
            for c in px {
                let n = if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push((c + n).clamp(0.0, 1.0));
            }
        }
    }
    PixelImage::new(cfg.height, cfg.width, data).expect("sized buffer")
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

/// Writes PNGs under `dir/images/` plus `dir/train.csv` and `dir/test.csv`.
/// Train and test share identities; every image is rendered independently.
pub fn generate(cfg: &SynthConfig, dir: &Path) -> Result<SynthCorpus> {
    cfg.validate()?;
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| ReidError::io(&img_dir, e))?;

    let mut jobs: Vec<(SplitName, usize, Role, usize)> = Vec::new();
    for i in 0..cfg.identities {
        for (split, n) in [
            (SplitName::Train, cfg.train_gallery_per_identity),
            (SplitName::Test, cfg.test_gallery_per_identity),
        ] {
            jobs.push((split, i, Role::Query, 0));
            jobs.extend((0..n).map(|k| (split, i, Role::Gallery, k)));
        }
    }

    let records = par::try_map_slice(&jobs, |&(split, i, role, k)| -> Result<(SplitName, ImageRecord)> {
        let tag = match split {
            SplitName::Train => "train",
            _ => "test",
        };
        let record_id = format!("{tag}-p{i:03}-{role}{k}");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(jobs_stream(split, i, role, k));
        let img = render(cfg, i, &mut rng);
        let path = img_dir.join(format!("{record_id}.png"));
        img.to_rgb8().save(&path).map_err(|e| ReidError::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok((
            split,
            ImageRecord {
                record_id,
                player_id: format!("p{i:03}"),
                role,
                image_path: path,
                height_px: cfg.height as u32,
                width_px: cfg.width as u32,
            },
        ))
    })?;

    let (train, test): (Vec<_>, Vec<_>) = records.into_iter().partition(|(s, _)| *s == SplitName::Train);
    let train = DatasetSplit::new(SplitName::Train, train.into_iter().map(|(_, r)| r).collect())?;
    let test = DatasetSplit::new(SplitName::Test, test.into_iter().map(|(_, r)| r).collect())?;
    let train_manifest = dir.join("train.csv");
    let test_manifest = dir.join("test.csv");
    write_manifest(&train_manifest, &train)?;
    write_manifest(&test_manifest, &test)?;
    Ok(SynthCorpus {
        train,
        test,
        train_manifest,
        test_manifest,
    })
}

fn jobs_stream(split: SplitName, i: usize, role: Role, k: usize) -> u64 {
    let s = match split {
        SplitName::Train => 0u64,
        _ => 1,
    };
    let r = match role {
        Role::Query => 0u64,
        Role::Gallery => 1,
    };
    (((i as u64) << 20) | (s << 18) | (r << 17)) + k as u64
}
