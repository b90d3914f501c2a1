//! Portable weights file.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! "PALLOR-NN"                 9 bytes magic
//! version                     u32 (currently 1)
//! spec_len                    u32
//! spec                        spec_len bytes, UTF-8 JSON of the NetworkSpec
//! has_standardization         u8 (0 or 1)
//!   n                         u32           } present only when
//!   input_mean, input_std     2·n × f64     } has_standardization = 1
//!   target_mean, target_std   2 × f64       }
//! param_count                 u64
//! params                      param_count × f64, per layer: weights then bias
//! ```
//!
//! The JSON twin carries the same content as one object with keys `magic`,
//! `version`, `spec`, `standardization` and `params`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{LayerParams, Network, Standardization};
use super::spec::NetworkSpec;
use crate::error::{PallorError, Result};

pub const MAGIC: &[u8; 9] = b"PALLOR-NN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightsFormat {
    Binary,
    Json,
}

#[derive(Serialize, Deserialize)]
struct JsonWeights {
    magic: String,
    version: u32,
    spec: NetworkSpec,
    standardization: Option<Standardization>,
    params: Vec<f64>,
}

fn flat_params(net: &Network) -> Vec<f64> {
    net.param_iter().collect()
}

fn unflatten(spec: &NetworkSpec, flat: &[f64]) -> Result<Vec<LayerParams>> {
    if flat.len() != spec.param_count() {
        return Err(PallorError::Weights(format!(
            "{} parameters stored, spec needs {}",
            flat.len(),
            spec.param_count()
        )));
    }
    let mut at = 0;
    Ok(spec
        .layers
        .iter()
        .map(|l| {
            let (w, b) = l.param_counts();
            let p = LayerParams { weights: flat[at..at + w].to_vec(), bias: flat[at + w..at + w + b].to_vec() };
            at += w + b;
            p
        })
        .collect())
}

pub fn encode_weights(net: &Network, format: WeightsFormat) -> Result<Vec<u8>> {
    match format {
        WeightsFormat::Json => {
            let doc = JsonWeights {
                magic: String::from_utf8_lossy(MAGIC).into_owned(),
                version: FORMAT_VERSION,
                spec: net.spec().clone(),
                standardization: net.standardization.clone(),
                params: flat_params(net),
            };
            serde_json::to_vec_pretty(&doc).map_err(|e| PallorError::Weights(e.to_string()))
        }
        WeightsFormat::Binary => {
            let spec = serde_json::to_vec(net.spec()).map_err(|e| PallorError::Weights(e.to_string()))?;
            let mut out = Vec::with_capacity(64 + spec.len() + 8 * net.spec().param_count());
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
            out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
            out.extend_from_slice(&spec);
            match &net.standardization {
                None => out.push(0),
                Some(s) => {
                    out.push(1);
                    out.extend_from_slice(&(s.input_mean.len() as u32).to_le_bytes());
                    for v in s.input_mean.iter().chain(&s.input_std).chain([&s.target_mean, &s.target_std]) {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            let params = flat_params(net);
            out.extend_from_slice(&(params.len() as u64).to_le_bytes());
            for v in params {
                out.extend_from_slice(&v.to_le_bytes());
            }
            Ok(out)
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PallorError::Weights("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| PallorError::Weights("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Network> {
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace());
    if first == Some(&b'{') {
        return decode_json(bytes);
    }
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(PallorError::Weights("bad magic string".into()));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(PallorError::Weights(format!("unsupported format version {version}")));
    }
    let spec_len = r.u32()? as usize;
    let spec: NetworkSpec =
        serde_json::from_slice(r.take(spec_len)?).map_err(|e| PallorError::Weights(format!("spec: {e}")))?;
    let standardization = match r.take(1)?[0] {
        0 => None,
        1 => {
            let n = r.u32()? as usize;
            let input_mean = r.f64s(n)?;
            let input_std = r.f64s(n)?;
            let t = r.f64s(2)?;
            Some(Standardization { input_mean, input_std, target_mean: t[0], target_std: t[1] })
        }
        other => return Err(PallorError::Weights(format!("bad standardization flag {other}"))),
    };
    let count = r.u64()? as usize;
    if count != spec.param_count() {
        return Err(PallorError::Weights(format!("{count} parameters stored, spec needs {}", spec.param_count())));
    }
    let flat = r.f64s(count)?;
    if r.pos != bytes.len() {
        return Err(PallorError::Weights(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    build(spec, standardization, &flat)
}

fn decode_json(bytes: &[u8]) -> Result<Network> {
    let doc: JsonWeights = serde_json::from_slice(bytes).map_err(|e| PallorError::Weights(format!("json: {e}")))?;
    if doc.magic.as_bytes() != MAGIC {
        return Err(PallorError::Weights("bad magic string".into()));
    }
    if doc.version != FORMAT_VERSION {
        return Err(PallorError::Weights(format!("unsupported format version {}", doc.version)));
    }
    build(doc.spec, doc.standardization, &doc.params)
}

fn build(spec: NetworkSpec, standardization: Option<Standardization>, flat: &[f64]) -> Result<Network> {
    let params = unflatten(&spec, flat)?;
    if let Some(s) = &standardization {
        let n = spec.input_shape.iter().product::<usize>();
        let finite = s.input_mean.iter().chain(&s.input_std).chain([&s.target_mean, &s.target_std]).all(|v| v.is_finite());
        if s.input_mean.len() != n || s.input_std.len() != n || !finite || s.target_std == 0.0 {
            return Err(PallorError::Weights("standardization constants do not match the input".into()));
        }
    }
    let mut net = Network::from_params(spec, params).map_err(|e| PallorError::Weights(e.to_string()))?;
    net.standardization = standardization;
    Ok(net)
}

/// Writes the network; the format follows the extension (`.json` → JSON twin).
pub fn save_weights(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => WeightsFormat::Json,
        _ => WeightsFormat::Binary,
    };
    fs::write(path, encode_weights(net, format)?).map_err(|e| PallorError::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(PallorError::MissingFile(path.to_path_buf()));
    }
    decode_weights(&fs::read(path).map_err(|e| PallorError::io(path, e))?)
}

/// Loads a file and checks it was written for `expected`.
pub fn load_weights_into(path: impl AsRef<Path>, expected: &NetworkSpec) -> Result<Network> {
    let net = load_weights(path)?;
    if net.spec().input_shape != expected.input_shape || net.spec().layers != expected.layers {
        return Err(PallorError::Weights("stored network spec does not match the expected spec".into()));
    }
    Ok(net)
}

/// Short content hash identifying a weights file.
pub fn content_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}
