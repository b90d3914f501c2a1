//! Evaluation dataset manifest (CSV).
//!
//! Required header: `image_path,card_x,card_y,card_w,card_h,gold_hb`.
//! Synthetic datasets add `gold_ei,mask_path`. Paths are relative to the
//! manifest's directory unless absolute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PallorError, Result};
use crate::imaging::Roi;

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_path: String,
    pub card_x: usize,
    pub card_y: usize,
    pub card_w: usize,
    pub card_h: usize,
    pub gold_hb: f64,
    #[serde(default)]
    pub gold_ei: Option<f64>,
    #[serde(default)]
    pub mask_path: Option<String>,
}

impl ManifestRow {
    pub fn card_roi(&self) -> Roi {
        Roi::new(self.card_x, self.card_y, self.card_w, self.card_h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Reads `path`, or `path/manifest.csv` when `path` is a directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(MANIFEST_FILE);
        }
        if !path.exists() {
            return Err(PallorError::MissingFile(path));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::Reader::from_path(&path).map_err(|e| PallorError::Dataset(format!("{}: {e}", path.display())))?;
        let headers = reader.headers().map_err(|e| PallorError::Dataset(e.to_string()))?.clone();
        for required in ["image_path", "card_x", "card_y", "card_w", "card_h", "gold_hb"] {
            if !headers.iter().any(|h| h == required) {
                return Err(PallorError::Dataset(format!("manifest is missing column {required}")));
            }
        }
        let rows = reader
            .deserialize()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| PallorError::Dataset(format!("row {}: {e}", i + 1))))
            .collect::<Result<Vec<ManifestRow>>>()?;
        Ok(Self { root, rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| PallorError::Dataset(format!("{}: {e}", path.display())))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| PallorError::Dataset(e.to_string()))?;
        }
        w.flush().map_err(|e| PallorError::io(path, e))
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        let p = Path::new(relative);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}
