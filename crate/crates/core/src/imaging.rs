//! Image representation, rectangular regions, binary masks and raster I/O.
//!
//! Images are stored as three row-major `f64` planes with a top-left origin.
//! Brightness is nominally in `[0, 255]` but nothing is clamped until export.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PallorError, Result};

pub const CHANNEL_NAMES: [&str; 3] = ["red", "green", "blue"];

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    planes: [Vec<f64>; 3],
}

impl RgbImage {
    pub fn new(width: usize, height: usize, planes: [Vec<f64>; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(PallorError::InvalidDimensions(format!(
                "{width}x{height} image"
            )));
        }
        let n = width * height;
        if planes.iter().any(|p| p.len() != n) {
            return Err(PallorError::InvalidDimensions(format!(
                "planes must hold {n} samples each"
            )));
        }
        if planes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(PallorError::InvalidDimensions(
                "non-finite brightness sample".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            planes,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let n = width * height;
        Self::new(width, height, rgb.map(|v| vec![v; n]))
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let n = width * height;
        let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                for c in 0..3 {
                    planes[c][y * width + x] = px[c];
                }
            }
        }
        Self::new(width, height, planes)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.planes[c]
    }

    pub fn planes(&self) -> &[Vec<f64>; 3] {
        &self.planes
    }

    pub fn into_planes(self) -> [Vec<f64>; 3] {
        self.planes
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = y * self.width + x;
        [self.planes[0][i], self.planes[1][i], self.planes[2][i]]
    }

    /// Applies `f` to every sample of channel `c`, for each channel.
    pub fn map_channels(&self, f: impl Fn(usize, f64) -> f64) -> RgbImage {
        let planes = [0, 1, 2].map(|c| self.planes[c].iter().map(|&v| f(c, v)).collect());
        RgbImage {
            width: self.width,
            height: self.height,
            planes,
        }
    }

    /// Per-channel diagonal scaling, e.g. an illumination change.
    pub fn scale(&self, gains: [f64; 3]) -> RgbImage {
        self.map_channels(|c, v| v * gains[c])
    }

    /// Copy of the image with pixels outside `mask` set to zero.
    pub fn masked(&self, mask: &BinaryMask) -> Result<RgbImage> {
        check_same_dims(self.width, self.height, mask.width(), mask.height())?;
        let planes = [0, 1, 2].map(|c| {
            self.planes[c]
                .iter()
                .zip(mask.bits())
                .map(|(&v, &on)| if on { v } else { 0.0 })
                .collect()
        });
        Ok(RgbImage {
            width: self.width,
            height: self.height,
            planes,
        })
    }

    /// Per-pixel luminance `(R + G + B) / 3`.
    pub fn luminance(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| (self.planes[0][i] + self.planes[1][i] + self.planes[2][i]) / 3.0)
            .collect()
    }

    pub fn full_roi(&self) -> Roi {
        Roi::new(0, 0, self.width, self.height)
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<RgbImage> {
        if width == 0 || height == 0 {
            return Err(PallorError::InvalidDimensions(format!(
                "resize target {width}x{height}"
            )));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let coords = |dst: usize, scale: f64, limit: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(limit - 1);
            let i1 = (i0 + 1).min(limit - 1);
            (i0, i1, src - i0 as f64)
        };
        let xs: Vec<_> = (0..width).map(|x| coords(x, sx, self.width)).collect();
        let ys: Vec<_> = (0..height).map(|y| coords(y, sy, self.height)).collect();
        let planes = [0, 1, 2].map(|c| {
            let p = &self.planes[c];
            let mut out = Vec::with_capacity(width * height);
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = p[y0 * self.width + x0] * (1.0 - fx) + p[y0 * self.width + x1] * fx;
                    let bot = p[y1 * self.width + x0] * (1.0 - fx) + p[y1 * self.width + x1] * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
            out
        });
        RgbImage::new(width, height, planes)
    }

    /// Nearest-neighbour resampling.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<RgbImage> {
        if width == 0 || height == 0 {
            return Err(PallorError::InvalidDimensions(format!(
                "resize target {width}x{height}"
            )));
        }
        let xs: Vec<usize> = (0..width).map(|x| nearest(x, self.width, width)).collect();
        let ys: Vec<usize> = (0..height).map(|y| nearest(y, self.height, height)).collect();
        let planes = [0, 1, 2].map(|c| {
            let p = &self.planes[c];
            let mut out = Vec::with_capacity(width * height);
            for &sy in &ys {
                for &sx in &xs {
                    out.push(p[sy * self.width + sx]);
                }
            }
            out
        });
        RgbImage::new(width, height, planes)
    }
}

fn nearest(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize).min(src_len - 1)
}

fn check_same_dims(w1: usize, h1: usize, w2: usize, h2: usize) -> Result<()> {
    if (w1, h1) != (w2, h2) {
        return Err(PallorError::DimensionMismatch(format!(
            "{w1}x{h1} vs {w2}x{h2}"
        )));
    }
    Ok(())
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Roi {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.w && y < self.y + self.h
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(PallorError::EmptyRegion);
        }
        let fits_x = self.x.checked_add(self.w).is_some_and(|r| r <= width);
        let fits_y = self.y.checked_add(self.h).is_some_and(|b| b <= height);
        if !fits_x || !fits_y {
            return Err(PallorError::RoiOutOfBounds(format!(
                "{self} does not fit a {width}x{height} image"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Roi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

impl std::str::FromStr for Roi {
    type Err = PallorError;

    /// Parses the `x,y,w,h` flag form.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || PallorError::InvalidConfig(format!("ROI must be x,y,w,h, got {s:?}"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let mut v = [0usize; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| bad())?;
        }
        Ok(Roi::new(v[0], v[1], v[2], v[3]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
    popcount: usize,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(PallorError::InvalidDimensions(format!(
                "{width}x{height} mask with {} bits",
                bits.len()
            )));
        }
        let popcount = bits.iter().filter(|&&b| b).count();
        Ok(Self {
            width,
            height,
            bits,
            popcount,
        })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn from_roi(width: usize, height: usize, roi: Roi) -> Result<Self> {
        roi.check_bounds(width, height)?;
        let bits = (0..width * height)
            .map(|i| roi.contains(i % width, i / width))
            .collect();
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn popcount(&self) -> usize {
        self.popcount
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
            popcount: self.bits.len() - self.popcount,
        }
    }

    pub fn intersect(&self, other: &BinaryMask) -> Result<BinaryMask> {
        check_same_dims(self.width, self.height, other.width, other.height)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        BinaryMask::new(self.width, self.height, bits)
    }

    /// Nearest-neighbour resampling to new dimensions.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<BinaryMask> {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = nearest(y, self.height, height);
            for x in 0..width {
                bits.push(self.bits[sy * self.width + nearest(x, self.width, width)]);
            }
        }
        BinaryMask::new(width, height, bits)
    }

    /// Run-length encoding of the true pixels: `[start, length]` pairs over
    /// row-major order.
    pub fn to_rle(&self) -> Vec<[usize; 2]> {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < self.bits.len() {
            if self.bits[i] {
                let start = i;
                while i < self.bits.len() && self.bits[i] {
                    i += 1;
                }
                runs.push([start, i - start]);
            } else {
                i += 1;
            }
        }
        runs
    }

    pub fn from_rle(width: usize, height: usize, runs: &[[usize; 2]]) -> Result<BinaryMask> {
        let n = width * height;
        let mut bits = vec![false; n];
        for &[start, len] in runs {
            let end = start
                .checked_add(len)
                .filter(|&e| e <= n)
                .ok_or_else(|| PallorError::InvalidDimensions(format!("run {start}+{len} exceeds {n}")))?;
            bits[start..end].iter_mut().for_each(|b| *b = true);
        }
        BinaryMask::new(width, height, bits)
    }
}

/// Region over which channel statistics are taken.
#[derive(Debug, Clone, Copy)]
pub enum Region<'a> {
    Rect(Roi),
    Mask(&'a BinaryMask),
}

impl From<Roi> for Region<'_> {
    fn from(r: Roi) -> Self {
        Region::Rect(r)
    }
}

impl<'a> From<&'a BinaryMask> for Region<'a> {
    fn from(m: &'a BinaryMask) -> Self {
        Region::Mask(m)
    }
}

/// Neumaier-compensated accumulator.
#[derive(Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Arithmetic mean of each channel over exactly the region's pixels.
pub fn channel_means<'a>(image: &RgbImage, region: impl Into<Region<'a>>) -> Result<[f64; 3]> {
    let mut acc = [CompensatedSum::default(); 3];
    let count = match region.into() {
        Region::Rect(roi) => {
            roi.check_bounds(image.width, image.height)?;
            for y in roi.y..roi.y + roi.h {
                let row = y * image.width;
                for i in row + roi.x..row + roi.x + roi.w {
                    for c in 0..3 {
                        acc[c].add(image.planes[c][i]);
                    }
                }
            }
            roi.area()
        }
        Region::Mask(mask) => {
            check_same_dims(image.width, image.height, mask.width, mask.height)?;
            if mask.popcount == 0 {
                return Err(PallorError::EmptyRegion);
            }
            for (i, _) in mask.bits.iter().enumerate().filter(|(_, &b)| b) {
                for c in 0..3 {
                    acc[c].add(image.planes[c][i]);
                }
            }
            mask.popcount
        }
    };
    Ok(acc.map(|a| a.total() / count as f64))
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(PallorError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| PallorError::io(path, e))?;
    decode_image(&bytes)
}

/// Decodes a binary PPM (P6, maxval 255) or 8-bit PNG from memory.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.is_empty() {
        return Err(PallorError::CorruptHeader("empty file".into()));
    }
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.len() < 2 {
        Err(PallorError::CorruptHeader("file too short for a magic number".into()))
    } else {
        Err(PallorError::UnsupportedFormat(format!(
            "unrecognised magic {:02x?}",
            &bytes[..bytes.len().min(4)]
        )))
    }
}

/// Cursor over the ASCII header shared by PPM and PBM.
struct NetpbmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> NetpbmHeader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 2 }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PallorError::CorruptHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PallorError::CorruptHeader(format!("bad {what}")))
    }

    /// Consumes the single whitespace byte separating header and raster.
    fn raster(self) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => Ok(&self.bytes[self.pos + 1..]),
            _ => Err(PallorError::CorruptHeader("missing raster separator".into())),
        }
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut header = NetpbmHeader::new(bytes);
    let width = header.number("width")?;
    let height = header.number("height")?;
    let maxval = header.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PallorError::CorruptHeader(format!("zero dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(PallorError::UnsupportedFormat(format!("PPM maxval {maxval}, need 255")));
    }
    let raster = header.raster()?;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| PallorError::CorruptHeader("dimensions overflow".into()))?;
    if raster.len() < n * 3 {
        return Err(PallorError::CorruptHeader(format!(
            "raster holds {} bytes, need {}",
            raster.len(),
            n * 3
        )));
    }
    let mut planes = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for px in raster[..n * 3].chunks_exact(3) {
        for c in 0..3 {
            planes[c].push(f64::from(px[c]));
        }
    }
    RgbImage::new(width, height, planes)
}

fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    use image::{DynamicImage, ImageFormat};
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| PallorError::CorruptHeader(format!("png: {e}")))?;
    let rgb = match img {
        DynamicImage::ImageRgb8(i) => i,
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            img.to_rgb8()
        }
        other => {
            return Err(PallorError::UnsupportedFormat(format!(
                "png color type {:?}, need 8-bit",
                other.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut planes = [Vec::with_capacity(w * h), Vec::with_capacity(w * h), Vec::with_capacity(w * h)];
    for px in rgb.pixels() {
        for c in 0..3 {
            planes[c].push(f64::from(px.0[c]));
        }
    }
    RgbImage::new(w, h, planes)
}

/// Clamp to `[0, 255]` and round half-up: the export quantizer.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 255.0) + 0.5).floor() as u8
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.reserve(image.len() * 3);
    for i in 0..image.len() {
        for c in 0..3 {
            out.push(quantize(image.planes[c][i]));
        }
    }
    out
}

pub fn save_image(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_ppm(image))
}

/// Encodes an 8-bit RGB PNG with the same quantizer as PPM export.
pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut raw = Vec::with_capacity(image.len() * 3);
    for i in 0..image.len() {
        for c in 0..3 {
            raw.push(quantize(image.planes[c][i]));
        }
    }
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, raw)
        .ok_or_else(|| PallorError::InvalidDimensions("png buffer".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| PallorError::UnsupportedFormat(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| PallorError::io(path, e))?;
    f.write_all(bytes).map_err(|e| PallorError::io(path, e))
}

/// 1-bit PBM (P4): rows padded to whole bytes, MSB first, 1 = set.
pub fn encode_pbm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P4\n{} {}\n", mask.width, mask.height).into_bytes();
    let row_bytes = mask.width.div_ceil(8);
    for y in 0..mask.height {
        let mut row = vec![0u8; row_bytes];
        for x in 0..mask.width {
            if mask.bits[y * mask.width + x] {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    out
}

pub fn decode_pbm(bytes: &[u8]) -> Result<BinaryMask> {
    if bytes.is_empty() {
        return Err(PallorError::CorruptHeader("empty file".into()));
    }
    if !bytes.starts_with(b"P4") {
        return Err(PallorError::UnsupportedFormat("expected PBM P4".into()));
    }
    let mut header = NetpbmHeader::new(bytes);
    let width = header.number("width")?;
    let height = header.number("height")?;
    let raster = header.raster()?;
    let row_bytes = width.div_ceil(8);
    if raster.len() < row_bytes * height {
        return Err(PallorError::CorruptHeader("truncated PBM raster".into()));
    }
    let mut bits = Vec::with_capacity(width * height);
    for y in 0..height {
        let row = &raster[y * row_bytes..(y + 1) * row_bytes];
        for x in 0..width {
            bits.push(row[x / 8] & (0x80 >> (x % 8)) != 0);
        }
    }
    BinaryMask::new(width, height, bits)
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pbm(mask))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(PallorError::MissingFile(path.to_path_buf()));
    }
    decode_pbm(&fs::read(path).map_err(|e| PallorError::io(path, e))?)
}
