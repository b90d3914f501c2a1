//! Erythema-index color features over the conjunctiva region.

use serde::{Deserialize, Serialize};

use crate::error::{PallorError, Result};
use crate::imaging::{channel_means, BinaryMask, RgbImage};

/// Brightness floor below which a region mean is a capture failure.
pub const BRIGHTNESS_FLOOR: f64 = 1.0;
pub const DEFAULT_MIN_AREA: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub mean_r: f64,
    pub mean_g: f64,
    pub ei: f64,
    pub mask_area: usize,
}

impl FeatureVector {
    /// Regressor input order.
    pub fn as_input(&self) -> [f64; 3] {
        [self.mean_r, self.mean_g, self.ei]
    }
}

/// `log10(R) - log10(G)` of region-mean brightness.
pub fn erythema_index(mean_r: f64, mean_g: f64) -> Result<f64> {
    for v in [mean_r, mean_g] {
        if !(v >= BRIGHTNESS_FLOOR) {
            return Err(PallorError::UnderFloorBrightness {
                value: v,
                floor: BRIGHTNESS_FLOOR,
            });
        }
    }
    Ok(mean_r.log10() - mean_g.log10())
}

pub fn extract_features(image: &RgbImage, mask: &BinaryMask, min_area: usize) -> Result<FeatureVector> {
    if mask.popcount() < min_area.max(1) {
        return Err(PallorError::SegmentationFailed {
            area: mask.popcount(),
            min_area,
        });
    }
    let [mean_r, mean_g, _] = channel_means(image, mask)?;
    Ok(FeatureVector {
        mean_r,
        mean_g,
        ei: erythema_index(mean_r, mean_g)?,
        mask_area: mask.popcount(),
    })
}
