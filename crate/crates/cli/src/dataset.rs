//! Loading manifest datasets and model files.

use std::path::Path;

use pallor_core::calibration::{calibrate, DEFAULT_TARGET};
use pallor_core::error::{PallorError, Result};
use pallor_core::exec::Exec;
use pallor_core::features::{extract_features, FeatureVector};
use pallor_core::imaging::{load_image, load_mask, BinaryMask, RgbImage};
use pallor_core::manifest::{Manifest, ManifestRow};
use pallor_core::neuralnet::load_weights;
use pallor_core::pipeline::{mask_calibrated, Models, PipelineConfig, PredictMeta};
use pallor_core::screening::Regressor;
use pallor_core::segmentation::{SegNet, SegmenterKind};

pub fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

pub fn load_models(regressor: Option<&Path>, segmenter: Option<&Path>) -> Result<Models> {
    Ok(Models {
        regressor: regressor.map(Regressor::load).transpose()?,
        segmenter: segmenter.map(|p| load_weights(p).and_then(SegNet::new)).transpose()?,
    })
}

pub fn load_row_image(manifest: &Manifest, row: &ManifestRow) -> Result<RgbImage> {
    load_image(manifest.resolve(&row.image_path))
}

/// Calibrated image and ground-truth mask of one row.
pub fn load_training_pair(manifest: &Manifest, row: &ManifestRow) -> Result<(RgbImage, BinaryMask)> {
    let mask_path = row
        .mask_path
        .as_deref()
        .ok_or_else(|| PallorError::Dataset(format!("{}: no mask_path", row.image_path)))?;
    let (calibrated, _) = calibrate(&load_row_image(manifest, row)?, row.card_roi(), DEFAULT_TARGET)?;
    let mask = load_mask(manifest.resolve(mask_path))?;
    if (mask.width(), mask.height()) != (calibrated.width(), calibrated.height()) {
        return Err(PallorError::DimensionMismatch(format!("{mask_path} does not match {}", row.image_path)));
    }
    Ok((calibrated, mask))
}

/// Features of every row, in manifest order; failed rows carry their error.
pub fn row_features(manifest: &Manifest, segmenter: SegmenterKind, models: &Models, exec: Exec) -> Vec<Result<FeatureVector>> {
    let config = PipelineConfig::default();
    exec.map(&manifest.rows, |row| {
        let image = load_row_image(manifest, row)?;
        let (calibrated, _) = calibrate(&image, row.card_roi(), config.calibration_target)?;
        let meta = PredictMeta { segmenter: Some(segmenter), ..PredictMeta::new(row.card_roi()) };
        let mask = mask_calibrated(&calibrated, &meta, models, &config)?;
        extract_features(&calibrated, &mask, config.min_area)
    })
}

/// Reports skipped rows on stderr. Missing files and unreadable images are
/// errors rather than skips.
pub fn report_skips<T>(manifest: &Manifest, results: &[Result<T>]) -> Result<usize> {
    let mut skipped = 0;
    for (row, r) in manifest.rows.iter().zip(results) {
        match r {
            Err(e @ (PallorError::MissingFile(_) | PallorError::Io { .. } | PallorError::CorruptHeader(_) | PallorError::UnsupportedFormat(_))) => {
                return Err(PallorError::Dataset(format!("{}: {e}", row.image_path)));
            }
            Err(e) => {
                eprintln!("skipping {}: {e}", row.image_path);
                skipped += 1;
            }
            Ok(_) => {}
        }
    }
    Ok(skipped)
}
