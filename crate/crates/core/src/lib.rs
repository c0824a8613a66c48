//! Class-agnostic player re-identification: contrastive image-to-image
//! fine-tuning, retrieval evaluation with k-reciprocal re-ranking, zero-shot
//! attribute probing and Score-CAM saliency.

pub mod data;
pub mod encoder;
pub mod loss;
pub mod error;
pub mod eval;
pub mod images;
pub mod par;
pub mod preprocess;
pub mod run;
pub mod sampler;
pub mod scorecam;
pub mod synth;
pub mod train;
pub mod zeroshot;

pub use error::{ReidError, Result};
