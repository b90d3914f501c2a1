//! White-square color calibration.
//!
//! Each channel is multiplied by `target / MB_c`, where `MB_c` is the mean
//! brightness of the card's white square in channel `c`. Correcting the
//! channels independently neutralizes any diagonal (per-channel) illumination
//! cast, so downstream color features do not depend on the light source.

use serde::{Deserialize, Serialize};

use crate::error::{PallorError, Result};
use crate::imaging::{channel_means, RgbImage, Roi, CHANNEL_NAMES};

pub const DEFAULT_TARGET: f64 = 200.0;

/// Minimum white-square channel mean; darker squares are treated as not visible.
pub const CARD_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub gains: [f64; 3],
    pub card_means: [f64; 3],
    pub target: f64,
}

pub fn compute_gains(image: &RgbImage, white_square: Roi, target: f64) -> Result<CalibrationResult> {
    if !(target.is_finite() && target > 0.0) {
        return Err(PallorError::InvalidConfig(format!("calibration target {target}")));
    }
    let card_means = channel_means(image, white_square)?;
    for (c, &mean) in card_means.iter().enumerate() {
        if mean < CARD_FLOOR {
            return Err(PallorError::UnderFloorCard {
                channel: CHANNEL_NAMES[c],
                mean,
                floor: CARD_FLOOR,
            });
        }
    }
    Ok(CalibrationResult {
        gains: card_means.map(|m| target / m),
        card_means,
        target,
    })
}

/// Multiplies every sample of channel `c` by `gains[c]`. No clamping.
pub fn apply_gains(image: &RgbImage, result: &CalibrationResult) -> RgbImage {
    image.scale(result.gains)
}

/// `compute_gains` followed by `apply_gains`.
pub fn calibrate(image: &RgbImage, white_square: Roi, target: f64) -> Result<(RgbImage, CalibrationResult)> {
    let result = compute_gains(image, white_square, target)?;
    Ok((apply_gains(image, &result), result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn with_card(means: [f64; 3]) -> RgbImage {
        RgbImage::from_fn(10, 10, |x, y| if x < 4 && y < 4 { means } else { [30.0, 60.0, 90.0] }).unwrap()
    }

    #[test]
    fn gains_direct_evaluation() {
        let r = compute_gains(&with_card([200.0; 3]), Roi::new(0, 0, 4, 4), DEFAULT_TARGET).unwrap();
        assert_eq!(r.gains, [1.0, 1.0, 1.0]);
        let r = compute_gains(&with_card([100.0, 200.0, 50.0]), Roi::new(0, 0, 4, 4), DEFAULT_TARGET).unwrap();
        assert_eq!(r.gains, [2.0, 1.0, 4.0]);
        assert_eq!(r.card_means, [100.0, 200.0, 50.0]);
    }

    #[test]
    fn under_floor_and_bounds_errors() {
        let err = compute_gains(&with_card([0.5, 200.0, 200.0]), Roi::new(0, 0, 4, 4), DEFAULT_TARGET).unwrap_err();
        assert!(matches!(err, PallorError::UnderFloorCard { channel: "red", .. }));
        let err = compute_gains(&with_card([200.0; 3]), Roi::new(8, 8, 4, 4), DEFAULT_TARGET).unwrap_err();
        assert!(matches!(err, PallorError::RoiOutOfBounds(_)));
    }

    #[test]
    fn apply_gains_does_not_clamp() {
        let img = RgbImage::new(2, 1, [vec![100.0, 150.0], vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let res = CalibrationResult { gains: [2.0, 1.0, 1.0], card_means: [100.0, 200.0, 200.0], target: 200.0 };
        let out = apply_gains(&img, &res);
        assert_eq!(out.plane(0), &[200.0, 300.0]);
        assert_eq!(out.plane(1), img.plane(1));
        let ident = CalibrationResult { gains: [1.0; 3], card_means: [200.0; 3], target: 200.0 };
        assert_eq!(apply_gains(&img, &ident), img);
    }

    fn random_image(rng: &mut ChaCha8Rng) -> (RgbImage, Roi) {
        let w = rng.random_range(4..40);
        let h = rng.random_range(4..40);
        let img = RgbImage::from_fn(w, h, |_, _| [0, 1, 2].map(|_| rng.random_range(5.0..255.0))).unwrap();
        let rw = rng.random_range(1..=w);
        let rh = rng.random_range(1..=h);
        let roi = Roi::new(rng.random_range(0..=w - rw), rng.random_range(0..=h - rh), rw, rh);
        (img, roi)
    }

    proptest! {
        #[test]
        fn white_square_becomes_target(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (img, roi) = random_image(&mut rng);
            let (cal, _) = calibrate(&img, roi, DEFAULT_TARGET).unwrap();
            for m in channel_means(&cal, roi).unwrap() {
                prop_assert!((m - 200.0).abs() <= 1e-9 * 200.0);
            }
        }

        #[test]
        fn gains_are_scale_equivariant(seed in any::<u64>(), s in proptest::array::uniform3(0.25f64..4.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (img, roi) = random_image(&mut rng);
            let base = compute_gains(&img, roi, DEFAULT_TARGET).unwrap();
            let scaled = compute_gains(&img.scale(s), roi, DEFAULT_TARGET).unwrap();
            for c in 0..3 {
                prop_assert!((scaled.card_means[c] - base.card_means[c] * s[c]).abs() <= 1e-12 * scaled.card_means[c]);
                prop_assert!((scaled.gains[c] - base.gains[c] / s[c]).abs() <= 1e-12 * scaled.gains[c]);
            }
        }
    }
}
