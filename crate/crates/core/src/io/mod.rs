//! File formats: PFM float maps, ASCII PLY clouds and the keyframe bundle
//! directory layout.

pub mod bundle;
pub mod pfm;
pub mod ply;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Format(String),
}
