//! Deterministic synthetic eye images with a known Hb ↔ color ground truth.
//!
//! The ground-truth map is a fabricated test fixture, not a clinical model:
//!
//! ```text
//! true_ei = −0.9 + 0.1·hb
//! G = 80,  B = 90,  R = 80 · 10^true_ei
//! ```
//!
//! so lower haemoglobin gives a paler conjunctiva. Each scene is a skin-tone
//! background with one conjunctiva ellipse and a calibration card whose white
//! square is exactly (200, 200, 200). Gaussian noise is added first, then a
//! per-channel illumination gain is applied to the whole image, card
//! included.
//!
//! Sample `i` draws all of its randomness from a ChaCha8 stream keyed by
//! `(seed, i)`, so serial and parallel generation agree byte for byte.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PallorError, Result};
use crate::exec::Exec;
use crate::imaging::{save_image, save_mask, BinaryMask, RgbImage, Roi};
use crate::neuralnet::{Activation, LayerParams, LayerSpec, Network, NetworkSpec, Standardization};
use crate::manifest::{Manifest, ManifestRow, MANIFEST_FILE};

pub const EI_INTERCEPT: f64 = -0.9;
pub const EI_SLOPE: f64 = 0.1;
pub const CONJUNCTIVA_G: f64 = 80.0;
pub const CONJUNCTIVA_B: f64 = 90.0;
pub const SKIN: [f64; 3] = [180.0, 140.0, 120.0];
pub const CARD_WHITE: [f64; 3] = [200.0; 3];
pub const CARD_FRAME: [f64; 3] = [25.0; 3];

/// Card outline (dark frame) and its white square, fixed in the top-left corner.
pub const CARD_FRAME_ROI: Roi = Roi::new(8, 8, 40, 40);
pub const CARD_WHITE_ROI: Roi = Roi::new(16, 16, 24, 24);

pub fn true_ei(hb: f64) -> f64 {
    EI_INTERCEPT + EI_SLOPE * hb
}

/// Inverse of [`true_ei`].
pub fn hb_from_ei(ei: f64) -> f64 {
    (ei - EI_INTERCEPT) / EI_SLOPE
}

/// A one-layer linear network computing [`hb_from_ei`] exactly from the
/// feature vector `[mean_r, mean_g, ei]`: a reference regressor for tests
/// and demos.
pub fn inverse_map_network() -> Network {
    let spec = NetworkSpec { input_shape: vec![3], layers: vec![LayerSpec::dense(3, 1, Activation::Linear)], seed: 0 };
    let params = vec![LayerParams { weights: vec![0.0, 0.0, 1.0 / EI_SLOPE], bias: vec![-EI_INTERCEPT / EI_SLOPE] }];
    let mut net = Network::from_params(spec, params).expect("fixed shape");
    net.standardization = Some(Standardization::identity(3));
    net
}

pub fn conjunctiva_color(hb: f64) -> [f64; 3] {
    [CONJUNCTIVA_G * 10f64.powf(true_ei(hb)), CONJUNCTIVA_G, CONJUNCTIVA_B]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub hb_range: [f64; 2],
    pub noise_sigma: f64,
    pub gain_range: [f64; 2],
    pub image_size: [usize; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            hb_range: [7.0, 14.0],
            noise_sigma: 2.0,
            gain_range: [0.5, 2.0],
            image_size: [256, 256],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.hb_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(PallorError::InvalidConfig(format!("hb range [{lo}, {hi}]")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PallorError::InvalidConfig(format!("noise sigma {}", self.noise_sigma)));
        }
        let [g0, g1] = self.gain_range;
        if !(g0 > 0.0 && g0 <= g1 && g1.is_finite()) {
            return Err(PallorError::InvalidConfig(format!("gain range [{g0}, {g1}]")));
        }
        let [w, h] = self.image_size;
        if w < 96 || h < 96 {
            return Err(PallorError::InvalidConfig(format!("image size {w}x{h}, need at least 96x96")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: RgbImage,
    pub mask_gt: BinaryMask,
    pub card_roi: Roi,
    pub gold_hb: f64,
    pub true_ei: f64,
    pub gains: [f64; 3],
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for sample `index` of a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)))
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.a;
        let dy = (y as f64 + 0.5 - self.cy) / self.b;
        dx * dx + dy * dy <= 1.0
    }

    /// Random horizontal ellipse covering 2–8% of the image, clear of the card.
    fn random(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Result<Self> {
        let (wf, hf) = (w as f64, h as f64);
        let keep_out = (CARD_FRAME_ROI.x + CARD_FRAME_ROI.w) as f64 + 2.0;
        for _ in 0..1000 {
            let area = rng.random_range(0.02..0.08) * wf * hf;
            let aspect = rng.random_range(1.5..2.5);
            let a = (area * aspect / std::f64::consts::PI).sqrt();
            let b = a / aspect;
            if 2.0 * a + 4.0 > wf || 2.0 * b + 4.0 > hf {
                continue;
            }
            let cx = rng.random_range(a + 2.0..wf - a - 2.0);
            let cy = rng.random_range(b + 2.0..hf - b - 2.0);
            if cx - a < keep_out && cy - b < keep_out {
                continue;
            }
            return Ok(Self { cx, cy, a, b });
        }
        Err(PallorError::InvalidConfig(format!("cannot place a conjunctiva in a {w}x{h} image")))
    }
}

/// One synthetic scene for haemoglobin `hb`, drawing from `rng`.
pub fn generate_sample(hb: f64, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SynthSample> {
    config.validate()?;
    let [lo, hi] = config.hb_range;
    if !(hb >= lo && hb <= hi) {
        return Err(PallorError::OutOfRange(format!("hb {hb} outside [{lo}, {hi}]")));
    }
    let [w, h] = config.image_size;
    let gains = [0, 1, 2].map(|_| draw(rng, config.gain_range));
    let ellipse = Ellipse::random(rng, w, h)?;
    let conj = conjunctiva_color(hb);
    let noise = (config.noise_sigma > 0.0).then(|| Normal::new(0.0, config.noise_sigma).expect("sigma validated"));

    let mut bits = vec![false; w * h];
    let image = RgbImage::from_fn(w, h, |x, y| {
        let base = if CARD_WHITE_ROI.contains(x, y) {
            CARD_WHITE
        } else if CARD_FRAME_ROI.contains(x, y) {
            CARD_FRAME
        } else if ellipse.contains(x, y) {
            bits[y * w + x] = true;
            conj
        } else {
            SKIN
        };
        let mut px = base;
        if let Some(n) = &noise {
            px.iter_mut().for_each(|v| *v += n.sample(rng));
        }
        [px[0] * gains[0], px[1] * gains[1], px[2] * gains[2]]
    })?;
    Ok(SynthSample {
        image,
        mask_gt: BinaryMask::new(w, h, bits)?,
        card_roi: CARD_WHITE_ROI,
        gold_hb: hb,
        true_ei: true_ei(hb),
        gains,
    })
}

/// Sample `index` of the dataset described by `config`.
pub fn dataset_sample(config: &SynthConfig, index: usize) -> Result<SynthSample> {
    let mut rng = sample_rng(config.seed, index as u64);
    let hb = draw(&mut rng, config.hb_range);
    generate_sample(hb, config, &mut rng)
}

pub fn generate_samples(config: &SynthConfig, exec: Exec) -> Result<Vec<SynthSample>> {
    config.validate()?;
    exec.map_range(config.n_samples, |i| dataset_sample(config, i)).into_iter().collect()
}

/// Writes `images/NNNN.ppm`, `masks/NNNN.pbm` and `manifest.csv` under `out`.
pub fn generate_dataset(config: &SynthConfig, out: impl AsRef<Path>, exec: Exec) -> Result<Manifest> {
    config.validate()?;
    if config.n_samples == 0 {
        return Err(PallorError::InvalidConfig("n_samples must be at least 1".into()));
    }
    let out = out.as_ref();
    for sub in ["images", "masks"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| PallorError::io(&dir, e))?;
    }
    let rows = exec
        .map_range(config.n_samples, |i| -> Result<ManifestRow> {
            let s = dataset_sample(config, i)?;
            let image_path = format!("images/{i:04}.ppm");
            let mask_path = format!("masks/{i:04}.pbm");
            save_image(&s.image, out.join(&image_path))?;
            save_mask(&s.mask_gt, out.join(&mask_path))?;
            Ok(ManifestRow {
                image_path,
                card_x: s.card_roi.x,
                card_y: s.card_roi.y,
                card_w: s.card_roi.w,
                card_h: s.card_roi.h,
                gold_hb: s.gold_hb,
                gold_ei: Some(s.true_ei),
                mask_path: Some(mask_path),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { root: out.to_path_buf(), rows };
    manifest.write(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::channel_means;

    fn clean() -> SynthConfig {
        SynthConfig { noise_sigma: 0.0, gain_range: [1.0, 1.0], ..Default::default() }
    }

    #[test]
    fn inverse_map_network_matches_formula() {
        use crate::neuralnet::Tensor;
        let net = inverse_map_network();
        for ei in [-0.3, 0.0, 0.123, 0.5] {
            let hb = net.forward(&Tensor::vector(vec![100.0, 80.0, ei])).unwrap().data()[0];
            assert!((hb - hb_from_ei(ei)).abs() < 1e-12);
        }
    }

    #[test]
    fn ground_truth_map_values() {
        assert!((true_ei(12.0) - 0.3).abs() < 1e-15);
        assert!((conjunctiva_color(12.0)[0] - 159.620_985_197_510_35).abs() < 1e-9);
        assert_eq!(true_ei(9.0), 0.0);
        assert_eq!(conjunctiva_color(9.0), [80.0, 80.0, 90.0]);
        assert!((hb_from_ei(true_ei(10.7)) - 10.7).abs() < 1e-12);
    }

    #[test]
    fn map_is_strictly_increasing() {
        let reds: Vec<f64> = (0..=70).map(|i| conjunctiva_color(7.0 + i as f64 * 0.1)[0]).collect();
        assert!(reds.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn clean_sample_structure() {
        let s = generate_sample(12.0, &clean(), &mut sample_rng(1, 0)).unwrap();
        assert_eq!(channel_means(&s.image, s.card_roi).unwrap(), CARD_WHITE);
        let frac = s.mask_gt.popcount() as f64 / s.image.len() as f64;
        assert!((0.015..0.085).contains(&frac), "{frac}");
        // mask_gt is exactly the painted conjunctiva
        let conj = conjunctiva_color(12.0);
        for i in 0..s.image.len() {
            let px = s.image.pixel(i % 256, i / 256);
            assert_eq!(s.mask_gt.bits()[i], px == conj);
        }
    }

    #[test]
    fn out_of_range_hb_rejected() {
        let err = generate_sample(15.0, &clean(), &mut sample_rng(0, 0)).unwrap_err();
        assert!(matches!(err, PallorError::OutOfRange(_)));
    }

    #[test]
    fn illumination_scales_whole_image() {
        let cfg = SynthConfig { noise_sigma: 0.0, ..Default::default() };
        let s = dataset_sample(&cfg, 3).unwrap();
        let card = channel_means(&s.image, s.card_roi).unwrap();
        for c in 0..3 {
            assert!((card[c] - 200.0 * s.gains[c]).abs() < 1e-9);
            assert!((0.5..2.0).contains(&s.gains[c]));
        }
    }

    #[test]
    fn fixed_hb_range() {
        let cfg = SynthConfig { n_samples: 5, hb_range: [11.0, 11.0], image_size: [128, 128], ..Default::default() };
        assert!(generate_samples(&cfg, Exec::Sequential).unwrap().iter().all(|s| s.gold_hb == 11.0));
    }

    #[test]
    fn serial_and_parallel_agree() {
        let cfg = SynthConfig { n_samples: 4, image_size: [128, 128], seed: 5, ..Default::default() };
        assert_eq!(
            generate_samples(&cfg, Exec::Sequential).unwrap(),
            generate_samples(&cfg, Exec::Parallel).unwrap()
        );
    }

    #[test]
    fn dataset_files_are_reproducible() {
        let cfg = SynthConfig { n_samples: 3, image_size: [96, 96], seed: 7, ..Default::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, a.path(), Exec::Parallel).unwrap();
        generate_dataset(&cfg, b.path(), Exec::Sequential).unwrap();
        for rel in ["manifest.csv", "images/0000.ppm", "images/0002.ppm", "masks/0001.pbm"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
        let m = Manifest::load(a.path()).unwrap();
        assert_eq!(m.rows.len(), 3);
        assert_eq!(m.rows[0].mask_path.as_deref(), Some("masks/0000.pbm"));
    }

    #[test]
    fn unwritable_output_rejected() {
        let cfg = SynthConfig { n_samples: 1, ..Default::default() };
        assert!(generate_dataset(&cfg, "/proc/pallor-cannot-write", Exec::Sequential).is_err());
    }
}
