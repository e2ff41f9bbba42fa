//! FMAP binary files and pyramid sidecars.
//!
//! Layout: `b"FMAP"`, version byte `0x01`, little-endian `u32` height, width,
//! channels, then `height * width * channels` little-endian `f32` in
//! `(y, x, c)` order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatError, FeatureMap, FeaturePyramid, PyramidLevel};

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u8 = 0x01;
const HEADER_LEN: usize = 4 + 1 + 12;

impl FeatureMap {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data().len() * 4);
        out.extend_from_slice(FMAP_MAGIC);
        out.push(FMAP_VERSION);
        for dim in [self.height(), self.width(), self.channels()] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in self.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatError> {
        if bytes.len() < HEADER_LEN {
            return Err(FeatError::BadFormat("truncated header".into()));
        }
        if &bytes[..4] != FMAP_MAGIC {
            return Err(FeatError::BadFormat("missing FMAP magic".into()));
        }
        if bytes[4] != FMAP_VERSION {
            return Err(FeatError::BadFormat(format!("unsupported version {}", bytes[4])));
        }
        let dim = |i: usize| {
            let o = 5 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        };
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| FeatError::BadFormat("dimension overflow".into()))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != n * 4 {
            return Err(FeatError::BadFormat(format!(
                "expected {} payload bytes, found {}",
                n * 4,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        FeatureMap::new(h, w, c, data)
    }
}

pub fn write_fmap(path: &Path, fmap: &FeatureMap) -> Result<(), FeatError> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&fmap.to_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_fmap(path: &Path) -> Result<FeatureMap, FeatError> {
    FeatureMap::from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevelEntry {
    pub scale: f64,
    pub file: String,
}

/// `pyramid.json` next to the level files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidSidecar {
    pub cell_stride: f64,
    /// Longest side in pixels of the frame fed to the first level, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_dim: Option<f64>,
    pub levels: Vec<PyramidLevelEntry>,
}

pub const SIDECAR_NAME: &str = "pyramid.json";

impl FeaturePyramid {
    /// Writes `l{i}.fmap` files and `pyramid.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), FeatError> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.levels().len());
        for (i, level) in self.levels().iter().enumerate() {
            let file = format!("l{i}.fmap");
            write_fmap(&dir.join(&file), &level.fmap)?;
            entries.push(PyramidLevelEntry { scale: level.scale, file });
        }
        let sidecar = PyramidSidecar {
            cell_stride: self.cell_stride(),
            max_dim: None,
            levels: entries,
        };
        fs::write(dir.join(SIDECAR_NAME), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, FeatError> {
        let sidecar: PyramidSidecar = serde_json::from_slice(&fs::read(dir.join(SIDECAR_NAME))?)?;
        let levels = sidecar
            .levels
            .iter()
            .map(|e| {
                Ok(PyramidLevel {
                    scale: e.scale,
                    fmap: read_fmap(&dir.join(&e.file))?,
                })
            })
            .collect::<Result<Vec<_>, FeatError>>()?;
        FeaturePyramid::new(levels, sidecar.cell_stride)
    }
}
