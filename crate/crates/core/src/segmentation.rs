//! Conjunctiva segmentation.
//!
//! Two segmenters produce a 3-channel "segmented conjunctiva" image (the
//! input with everything but the conjunctiva zeroed): a trainable
//! encoder–decoder CNN and a classical chromaticity rule used as a
//! desk-scale oracle. Either output is turned into a binary mask by
//! thresholding a 128-bin luminance histogram with Otsu's method.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{PallorError, Result};
use crate::exec::Exec;
use crate::imaging::{BinaryMask, RgbImage};
use crate::neuralnet::{self, Network, NetworkSpec, Tensor, TrainingConfig};

pub const HISTOGRAM_BINS: usize = 128;
pub const BIN_WIDTH: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    #[default]
    Cnn,
    Classical,
}

impl std::str::FromStr for SegmenterKind {
    type Err = PallorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(SegmenterKind::Cnn),
            "classical" => Ok(SegmenterKind::Classical),
            other => Err(PallorError::InvalidConfig(format!("unknown segmenter {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterOutput {
    pub soft: RgbImage,
    pub source: SegmenterKind,
}

/// Pixel rule of the classical segmenter.
///
/// A pixel is a candidate when its luminance `(R+G+B)/3` lies in
/// `[v_min, v_max]` and it is either red-dominant (`R/(R+G+B) ≥ r_min`) or
/// shows a blue-over-green excess (`(B−G)/(R+G+B) ≥ bg_min`). The second
/// clause keeps pale, low-haemoglobin tissue whose red share falls below
/// neutral gray; neutral and skin tones have `B ≤ G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalParams {
    pub r_min: f64,
    pub bg_min: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for ClassicalParams {
    fn default() -> Self {
        Self { r_min: 0.45, bg_min: 0.015, v_min: 40.0, v_max: 250.0 }
    }
}

impl ClassicalParams {
    pub fn keeps(&self, [r, g, b]: [f64; 3]) -> bool {
        let sum = r + g + b;
        let lum = sum / 3.0;
        if sum <= 0.0 || lum < self.v_min || lum > self.v_max {
            return false;
        }
        r / sum >= self.r_min || (b - g) / sum >= self.bg_min
    }
}

/// Keeps the largest 4-connected component of candidate pixels. Equal-size
/// components resolve to the one whose first pixel comes first in row-major
/// order.
pub fn classical_segment(image: &RgbImage, params: &ClassicalParams) -> SegmenterOutput {
    let (w, h) = (image.width(), image.height());
    let candidate: Vec<bool> = (0..w * h).map(|i| params.keeps(image.pixel(i % w, i / w))).collect();
    let keep = largest_component(&candidate, w, h);
    let bits = BinaryMask::new(w, h, keep).expect("dimensions come from the image");
    SegmenterOutput { soft: image.masked(&bits).expect("same dimensions"), source: SegmenterKind::Classical }
}

fn largest_component(candidate: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut label = vec![0u32; w * h];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !candidate[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let neighbours = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            for j in neighbours.into_iter().flatten() {
                if candidate[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    label.iter().map(|&l| best.1 != 0 && l == best.1).collect()
}

pub const DEFAULT_RESOLUTION: usize = 128;
pub const DEFAULT_WIDTHS: [usize; 3] = [8, 16, 16];

/// Default segmenter architecture (7 learnable layers at 128×128).
pub fn default_segmenter_spec(seed: u64) -> NetworkSpec {
    NetworkSpec::segmenter(DEFAULT_RESOLUTION, &DEFAULT_WIDTHS, seed)
}

/// Default segmenter schedule: 25 epochs of momentum SGD, batch 4.
pub fn default_segmenter_config(seed: u64) -> TrainingConfig {
    TrainingConfig { learning_rate: 0.02, epochs: 25, batch_size: 4, momentum: 0.9, seed, ..Default::default() }
}

/// Trained encoder–decoder segmenter.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    net: Network,
}

impl SegNet {
    pub fn new(net: Network) -> Result<Self> {
        match (net.input_shape(), net.output_shape()) {
            ([3, h, w], [3, oh, ow]) if h == oh && w == ow => Ok(Self { net }),
            (i, o) => Err(PallorError::Shape(format!(
                "segmenter must map [3,H,W] to [3,H,W], got {i:?} → {o:?}"
            ))),
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    /// `(height, width)` of the network input.
    pub fn resolution(&self) -> (usize, usize) {
        let s = self.net.input_shape();
        (s[1], s[2])
    }

    fn to_input(&self, image: &RgbImage) -> Result<Tensor> {
        let (h, w) = self.resolution();
        let resized = image.resize_bilinear(w, h)?;
        let data = resized.into_planes().into_iter().flatten().map(|v| v / 255.0).collect();
        Tensor::new(vec![3, h, w], data)
    }
}

/// Runs the network at its training resolution and upsamples the result back
/// to the input dimensions (nearest neighbour). Output is clamped to `[0, 255]`.
pub fn cnn_segment(image: &RgbImage, model: &SegNet) -> Result<SegmenterOutput> {
    let (h, w) = model.resolution();
    let out = model.net.forward(&model.to_input(image)?)?;
    let n = h * w;
    let data = out.data();
    let planes = [0, 1, 2].map(|c| data[c * n..(c + 1) * n].iter().map(|v| (v * 255.0).clamp(0.0, 255.0)).collect());
    let soft = RgbImage::new(w, h, planes)?.resize_nearest(image.width(), image.height())?;
    Ok(SegmenterOutput { soft, source: SegmenterKind::Cnn })
}

/// Builds a `(input, target)` training pair: the resized image and the same
/// image with non-conjunctiva pixels zeroed, both scaled to `[0, 1]`.
pub fn segmentation_pair(image: &RgbImage, mask: &BinaryMask, resolution: (usize, usize)) -> Result<(Tensor, Tensor)> {
    let (h, w) = resolution;
    let small = image.resize_bilinear(w, h)?;
    let small_mask = mask.resize_nearest(w, h)?;
    let target = small.masked(&small_mask)?;
    let to_tensor = |img: RgbImage| Tensor::new(vec![3, h, w], img.into_planes().into_iter().flatten().map(|v| v / 255.0).collect());
    Ok((to_tensor(small)?, to_tensor(target)?))
}

/// Trains a segmenter on `(calibrated image, ground-truth mask)` pairs.
pub fn train_segmenter(
    samples: &[(RgbImage, BinaryMask)],
    spec: NetworkSpec,
    config: &TrainingConfig,
    exec: Exec,
    on_epoch: impl FnMut(usize, f64, &Network),
) -> Result<(SegNet, Vec<f64>)> {
    let net = Network::init(spec)?;
    let mut seg = SegNet::new(net)?;
    let res = seg.resolution();
    let pairs: Vec<(Tensor, Tensor)> = exec
        .map(samples, |(img, mask)| segmentation_pair(img, mask, res))
        .into_iter()
        .collect::<Result<_>>()?;
    let curve = neuralnet::train(&mut seg.net, &pairs, config, exec, on_epoch)?;
    Ok((seg, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskHistogram {
    pub bins: Vec<u64>,
    pub threshold_bin: usize,
    pub threshold_value: f64,
    /// All mass fell into a single bin; the mask is then `L > 0`.
    pub degenerate: bool,
}

pub fn luminance_bin(l: f64) -> usize {
    ((l / BIN_WIDTH).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

/// Otsu threshold over histogram bins: the bin `t` maximizing the
/// between-class variance when bins `0..=t` form the background. Ties go to
/// the lowest bin.
pub fn otsu_bin(bins: &[u64]) -> usize {
    let total: u64 = bins.iter().sum();
    let weighted: u128 = bins.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let mut n0: u64 = 0;
    let mut s0: u128 = 0;
    let mut best = (0usize, 0.0f64);
    for (t, &c) in bins.iter().enumerate() {
        n0 += c;
        s0 += t as u128 * c as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // n0·n1·(μ0 − μ1)² = (s0·N − S·n0)² / (n0·n1)
        let diff = s0 as i128 * total as i128 - weighted as i128 * n0 as i128;
        let diff = diff as f64;
        let var = diff * diff / (n0 as f64 * n1 as f64);
        if var > best.1 {
            best = (t, var);
        }
    }
    best.0
}

pub fn to_mask(soft: &SegmenterOutput) -> (BinaryMask, MaskHistogram) {
    let lum = soft.soft.luminance();
    let mut bins = vec![0u64; HISTOGRAM_BINS];
    for &l in &lum {
        bins[luminance_bin(l)] += 1;
    }
    let degenerate = bins.iter().filter(|&&c| c > 0).count() <= 1;
    let threshold_bin = if degenerate { 0 } else { otsu_bin(&bins) };
    let threshold_value = (threshold_bin + 1) as f64 * BIN_WIDTH;
    let cut = if degenerate { 0.0 } else { threshold_value };
    let bits = lum.iter().map(|&l| l > cut).collect();
    let mask = BinaryMask::new(soft.soft.width(), soft.soft.height(), bits).expect("dimensions come from the image");
    (mask, MaskHistogram { bins, threshold_bin, threshold_value, degenerate })
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(PallorError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{Activation, LayerParams, LayerSpec};
    use num_bigint::BigInt;
    use proptest::prelude::*;

    fn ellipse_scene(w: usize, h: usize, inside: [f64; 3], outside: [f64; 3]) -> (RgbImage, BinaryMask) {
        let (cx, cy, a, b) = (w as f64 * 0.5, h as f64 * 0.45, w as f64 * 0.25, h as f64 * 0.15);
        let inside_at = |x: usize, y: usize| {
            let dx = (x as f64 + 0.5 - cx) / a;
            let dy = (y as f64 + 0.5 - cy) / b;
            dx * dx + dy * dy <= 1.0
        };
        let img = RgbImage::from_fn(w, h, |x, y| if inside_at(x, y) { inside } else { outside }).unwrap();
        let bits = (0..w * h).map(|i| inside_at(i % w, i / w)).collect();
        (img, BinaryMask::new(w, h, bits).unwrap())
    }

    fn nonzero(out: &SegmenterOutput) -> Vec<bool> {
        let s = &out.soft;
        (0..s.len()).map(|i| (0..3).any(|c| s.plane(c)[i] != 0.0)).collect()
    }

    #[test]
    fn red_ellipse_on_gray_is_kept_exactly() {
        let (img, truth) = ellipse_scene(64, 48, [200.0, 60.0, 60.0], [120.0; 3]);
        let out = classical_segment(&img, &ClassicalParams::default());
        assert_eq!(nonzero(&out), truth.bits());
        assert_eq!(out.source, SegmenterKind::Classical);
    }

    #[test]
    fn pale_conjunctiva_on_skin_is_kept() {
        let (img, truth) = ellipse_scene(64, 48, [50.5, 80.0, 90.0], [180.0, 140.0, 120.0]);
        assert_eq!(nonzero(&classical_segment(&img, &ClassicalParams::default())), truth.bits());
    }

    #[test]
    fn gray_image_segments_to_nothing() {
        let img = RgbImage::filled(20, 20, [120.0; 3]).unwrap();
        let out = classical_segment(&img, &ClassicalParams::default());
        assert!(out.soft.planes().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn only_largest_blob_survives() {
        // 25x20 = 500 px blob and 10x8 = 80 px blob
        let img = RgbImage::from_fn(60, 40, |x, y| {
            if (2..27).contains(&x) && (2..22).contains(&y) || (40..50).contains(&x) && (30..38).contains(&y) {
                [200.0, 60.0, 60.0]
            } else {
                [120.0; 3]
            }
        })
        .unwrap();
        let kept = nonzero(&classical_segment(&img, &ClassicalParams::default()));
        assert_eq!(kept.iter().filter(|&&k| k).count(), 500);
        assert!(kept[2 * 60 + 2]);
        assert!(!kept[30 * 60 + 40]);
    }

    #[test]
    fn classical_segment_is_idempotent() {
        let (img, _) = ellipse_scene(40, 40, [210.0, 70.0, 80.0], [180.0, 140.0, 120.0]);
        let once = classical_segment(&img, &ClassicalParams::default());
        let twice = classical_segment(&once.soft, &ClassicalParams::default());
        assert_eq!(nonzero(&once), nonzero(&twice));
    }

    #[test]
    fn to_mask_degenerate_cases() {
        let zero = SegmenterOutput { soft: RgbImage::filled(8, 8, [0.0; 3]).unwrap(), source: SegmenterKind::Cnn };
        let (mask, hist) = to_mask(&zero);
        assert_eq!(mask.popcount(), 0);
        assert!(hist.degenerate);
        assert_eq!(hist.bins[0], 64);

        let flat = SegmenterOutput { soft: RgbImage::filled(8, 8, [100.0; 3]).unwrap(), source: SegmenterKind::Cnn };
        let (mask, hist) = to_mask(&flat);
        assert!(hist.degenerate);
        assert_eq!(mask.popcount(), 64);
    }

    #[test]
    fn to_mask_bimodal() {
        // 60 px at luminance 20, 40 px at 220
        let img = RgbImage::from_fn(10, 10, |_, y| if y < 6 { [20.0; 3] } else { [220.0; 3] }).unwrap();
        let (mask, hist) = to_mask(&SegmenterOutput { soft: img, source: SegmenterKind::Classical });
        assert!(hist.threshold_value > 20.0 && hist.threshold_value < 220.0);
        assert_eq!(hist.threshold_value, (hist.threshold_bin + 1) as f64 * 2.0);
        assert_eq!(hist.bins.iter().sum::<u64>(), 100);
        assert_eq!(mask.popcount(), 40);
        assert!(mask.get(0, 9) && !mask.get(0, 0));
        assert_eq!(hist.threshold_bin, oracle_otsu(&hist.bins));
    }

    #[test]
    fn iou_cases() {
        let mk = |f: &dyn Fn(usize) -> bool| BinaryMask::new(20, 10, (0..200).map(f).collect()).unwrap();
        let a = mk(&|i| i < 100);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &mk(&|i| i >= 100)).unwrap(), 0.0);
        let b = mk(&|i| (50..150).contains(&i));
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let e = BinaryMask::empty(20, 10).unwrap();
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert!(iou(&a, &BinaryMask::empty(10, 20).unwrap()).is_err());
    }

    #[test]
    fn passthrough_network_returns_input() {
        let spec = NetworkSpec { input_shape: vec![3, 16, 16], layers: vec![LayerSpec::conv(3, 3, 1, 1, 0, Activation::Linear)], seed: 0 };
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let net = Network::from_params(spec, vec![LayerParams { weights: eye, bias: vec![0.0; 3] }]).unwrap();
        let seg = SegNet::new(net).unwrap();
        let img = RgbImage::from_fn(16, 16, |x, y| [x as f64 * 10.0, y as f64 * 5.0, 33.0]).unwrap();
        let out = cnn_segment(&img, &seg).unwrap();
        for c in 0..3 {
            for (a, b) in out.soft.plane(c).iter().zip(img.plane(c)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cnn_output_matches_input_dimensions() {
        let seg = SegNet::new(Network::init(NetworkSpec::segmenter(16, &[2, 2], 1)).unwrap()).unwrap();
        let img = RgbImage::filled(37, 23, [90.0, 60.0, 70.0]).unwrap();
        let out = cnn_segment(&img, &seg).unwrap();
        assert_eq!((out.soft.width(), out.soft.height()), (37, 23));
        assert!(out.soft.planes().iter().flatten().all(|v| (0.0..=255.0).contains(v)));
        assert!(SegNet::new(Network::init(NetworkSpec::regressor(0)).unwrap()).is_err());
    }

    /// Textbook Otsu in exact rational arithmetic over bin centres:
    /// σ²_B(t) = w0·w1·(μ0 − μ1)², maximized by exhaustive search.
    fn oracle_otsu(bins: &[u64]) -> usize {
        let total: BigInt = bins.iter().map(|&c| BigInt::from(c)).sum();
        let mut best: Option<(usize, BigInt, BigInt)> = None;
        for t in 0..bins.len() {
            let center = |i: usize| BigInt::from(2 * i as u64 + 1);
            let n0: BigInt = bins[..=t].iter().map(|&c| BigInt::from(c)).sum();
            let n1 = &total - &n0;
            if n0 == BigInt::from(0) || n1 == BigInt::from(0) {
                continue;
            }
            let s0: BigInt = (0..=t).map(|i| center(i) * BigInt::from(bins[i])).sum();
            let s1: BigInt = (t + 1..bins.len()).map(|i| center(i) * BigInt::from(bins[i])).sum();
            // (μ0 − μ1)² · w0 · w1 = (s0·n1 − s1·n0)² / (n0·n1·N²)
            let d = &s0 * &n1 - &s1 * &n0;
            let num = &d * &d;
            let den = &n0 * &n1 * &total * &total;
            let better = match &best {
                None => num > BigInt::from(0),
                Some((_, bn, bd)) => &num * bd > bn * &den,
            };
            if better {
                best = Some((t, num, den));
            }
        }
        best.map_or(0, |b| b.0)
    }

    proptest! {
        #[test]
        fn otsu_matches_exhaustive_oracle(
            bins in proptest::collection::vec(prop_oneof![Just(0u64), 0u64..50, 0u64..10_000], HISTOGRAM_BINS)
        ) {
            prop_assume!(bins.iter().filter(|&&c| c > 0).count() >= 2);
            prop_assert_eq!(otsu_bin(&bins), oracle_otsu(&bins));
        }

        #[test]
        fn mask_and_complement_partition(vals in proptest::collection::vec(0.0f64..300.0, 48)) {
            let img = RgbImage::new(4, 4, [vals[..16].to_vec(), vals[16..32].to_vec(), vals[32..].to_vec()]).unwrap();
            let (mask, hist) = to_mask(&SegmenterOutput { soft: img, source: SegmenterKind::Cnn });
            prop_assert_eq!(mask.popcount() + mask.complement().popcount(), 16);
            prop_assert_eq!(hist.bins.iter().sum::<u64>(), 16);
        }

        #[test]
        fn iou_symmetric(a in proptest::collection::vec(any::<bool>(), 30), b in proptest::collection::vec(any::<bool>(), 30)) {
            let a = BinaryMask::new(6, 5, a).unwrap();
            let b = BinaryMask::new(6, 5, b).unwrap();
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn oracle_self_check() {
        let mut bins = vec![0u64; HISTOGRAM_BINS];
        bins[10] = 60;
        bins[110] = 40;
        assert_eq!(oracle_otsu(&bins), 10);
    }
}
