//! End-to-end analysis of one photograph: calibrate → segment → mask →
//! features → Hb → cut-off decisions. Shared by the HTTP service and the CLI
//! so both return the same [`PredictResponse`].

use std::time::Instant;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::calibration::{calibrate, DEFAULT_TARGET};
use crate::error::{PallorError, Result};
use crate::features::{extract_features, FeatureVector, DEFAULT_MIN_AREA};
use crate::imaging::{BinaryMask, RgbImage, Roi};
use crate::screening::{classify, predict_hb, validate_cutoffs, CutoffDecision, Regressor, DEFAULT_CUTOFFS};
use crate::segmentation::{classical_segment, cnn_segment, to_mask, ClassicalParams, SegNet, SegmenterKind};

/// Request parameters other than the image itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictMeta {
    pub card_roi: Roi,
    #[serde(default)]
    pub conjunctiva_roi: Option<Roi>,
    #[serde(default)]
    pub segmenter: Option<SegmenterKind>,
    #[serde(default)]
    pub cutoffs: Option<Vec<f64>>,
}

impl PredictMeta {
    pub fn new(card_roi: Roi) -> Self {
        Self { card_roi, conjunctiva_roi: None, segmenter: None, cutoffs: None }
    }
}

/// Loaded models. Either may be absent; requests needing a missing one fail
/// with [`PallorError::ModelNotLoaded`].
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub regressor: Option<Regressor>,
    pub segmenter: Option<SegNet>,
}

/// Fixed analysis settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub calibration_target: f64,
    pub min_area: usize,
    pub classical: ClassicalParams,
    pub default_cutoffs: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            calibration_target: DEFAULT_TARGET,
            min_area: DEFAULT_MIN_AREA,
            classical: ClassicalParams::default(),
            default_cutoffs: DEFAULT_CUTOFFS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRle {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<[usize; 2]>,
}

impl MaskRle {
    pub fn encode(mask: &BinaryMask) -> Self {
        Self { width: mask.width(), height: mask.height(), runs: mask.to_rle() }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        BinaryMask::from_rle(self.width, self.height, &self.runs)
    }
}

/// Cut-off decisions, serialized as an ordered `{"<cutoff>": anemic}` object.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Decisions(pub Vec<CutoffDecision>);

impl Serialize for Decisions {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for d in &self.0 {
            map.serialize_entry(&d.cutoff.to_string(), &d.anemic)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Decisions {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Decisions;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a map from cut-off to boolean")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut m: A) -> std::result::Result<Decisions, A::Error> {
                let mut out = Vec::new();
                while let Some((k, anemic)) = m.next_entry::<String, bool>()? {
                    let cutoff = k.parse().map_err(serde::de::Error::custom)?;
                    out.push(CutoffDecision { cutoff, anemic });
                }
                Ok(Decisions(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub calibration_ms: f64,
    pub segmentation_ms: f64,
    pub features_ms: f64,
    pub regression_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub gains: [f64; 3],
    pub features: FeatureVector,
    pub hb: f64,
    pub clamped: bool,
    pub decisions: Decisions,
    pub mask_rle: MaskRle,
    pub model_id: String,
    pub timings: Timings,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Segments an already calibrated image and thresholds it into a mask,
/// restricted to `conjunctiva_roi` when given.
pub fn mask_calibrated(calibrated: &RgbImage, meta: &PredictMeta, models: &Models, config: &PipelineConfig) -> Result<BinaryMask> {
    let (w, h) = (calibrated.width(), calibrated.height());
    if let Some(roi) = meta.conjunctiva_roi {
        roi.check_bounds(w, h)?;
    }
    let soft = match meta.segmenter.unwrap_or_default() {
        SegmenterKind::Classical => classical_segment(calibrated, &config.classical),
        SegmenterKind::Cnn => {
            let net = models.segmenter.as_ref().ok_or_else(|| PallorError::ModelNotLoaded("segmenter".into()))?;
            cnn_segment(calibrated, net)?
        }
    };
    let (mask, _) = to_mask(&soft);
    match meta.conjunctiva_roi {
        Some(roi) => mask.intersect(&BinaryMask::from_roi(w, h, roi)?),
        None => Ok(mask),
    }
}

/// Full analysis of one image.
pub fn analyze(image: &RgbImage, meta: &PredictMeta, models: &Models, config: &PipelineConfig) -> Result<PredictResponse> {
    let start = Instant::now();
    let regressor = models.regressor.as_ref().ok_or_else(|| PallorError::ModelNotLoaded("regressor".into()))?;
    let cutoffs = meta.cutoffs.clone().unwrap_or_else(|| config.default_cutoffs.clone());
    validate_cutoffs(&cutoffs)?;

    let t = Instant::now();
    let (calibrated, cal) = calibrate(image, meta.card_roi, config.calibration_target)?;
    let calibration_ms = ms(t);

    let t = Instant::now();
    let mask = mask_calibrated(&calibrated, meta, models, config)?;
    let segmentation_ms = ms(t);

    let t = Instant::now();
    let features = extract_features(&calibrated, &mask, config.min_area)?;
    let features_ms = ms(t);

    let t = Instant::now();
    let pred = predict_hb(regressor, &features)?;
    let regression_ms = ms(t);

    Ok(PredictResponse {
        gains: cal.gains,
        features,
        hb: pred.hb,
        clamped: pred.clamped,
        decisions: Decisions(cutoffs.iter().map(|&c| classify(&pred, c)).collect()),
        mask_rle: MaskRle::encode(&mask),
        model_id: pred.model_id,
        timings: Timings { calibration_ms, segmentation_ms, features_ms, regression_ms, total_ms: ms(start) },
    })
}
