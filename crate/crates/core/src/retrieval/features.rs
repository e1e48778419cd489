//! Patch feature grids and their on-disk form.
//!
//! Layout, little-endian:
//!
//! ```text
//! "ADFEAT1"  7 bytes
//! h_p        u32
//! w_p        u32
//! c_p        u32
//! dtype      u32   (1 = float32)
//! payload    h_p * w_p * c_p float32, row-major (h, w, c)
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::RetrievalError;

pub const FEATURE_MAGIC: &[u8; 7] = b"ADFEAT1";
pub const FEATURE_DTYPE_F32: u32 = 1;
pub const FEATURE_EXTENSION: &str = "featbin";
const HEADER_LEN: usize = 7 + 4 * 4;

/// An `H_p x W_p x C_p` feature map for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    image_id: String,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, RetrievalError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(RetrievalError::InvalidGrid(format!(
                "dimensions must be >= 1, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(RetrievalError::InvalidGrid(format!(
                "payload has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::InvalidGrid("non-finite feature value".into()));
        }
        Ok(Self { image_id: image_id.into(), height, width, channels, data })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn patch(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn patches(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.channels)
    }

    pub fn with_id(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self
    }
}

pub fn encode_feature_bytes(grid: &FeatureGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.data.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [grid.height, grid.width, grid.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&FEATURE_DTYPE_F32.to_le_bytes());
    for v in &grid.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_feature_bytes(image_id: &str, bytes: &[u8]) -> Result<FeatureGrid, RetrievalError> {
    if bytes.len() < FEATURE_MAGIC.len() || &bytes[..FEATURE_MAGIC.len()] != FEATURE_MAGIC {
        return Err(RetrievalError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(RetrievalError::Malformed("truncated header".into()));
    }
    let (h, w, c) = (read_u32(bytes, 7) as usize, read_u32(bytes, 11) as usize, read_u32(bytes, 15) as usize);
    let dtype = read_u32(bytes, 19);
    if dtype != FEATURE_DTYPE_F32 {
        return Err(RetrievalError::Malformed(format!("unsupported dtype code {dtype}")));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| RetrievalError::Malformed("header dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(RetrievalError::Malformed(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    FeatureGrid::new(image_id, h, w, c, data)
}

pub fn write_feature_file(grid: &FeatureGrid, path: &Path) -> Result<(), RetrievalError> {
    fs::write(path, encode_feature_bytes(grid))
        .map_err(|source| RetrievalError::Io { path: path.to_path_buf(), source })
}

/// Reads a feature file; the image id is the file stem.
pub fn read_feature_file(path: &Path) -> Result<FeatureGrid, RetrievalError> {
    let bytes = fs::read(path).map_err(|source| RetrievalError::Io { path: path.to_path_buf(), source })?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_feature_bytes(&id, &bytes)
}

/// Loads every `*.featbin` file in `dir`, keyed by image id.
pub fn load_feature_dir(dir: &Path) -> Result<HashMap<String, FeatureGrid>, RetrievalError> {
    let io_err = |source| RetrievalError::Io { path: dir.to_path_buf(), source };
    let mut out = HashMap::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.extension().is_some_and(|e| e == FEATURE_EXTENSION) {
            let grid = read_feature_file(&path)?;
            out.insert(grid.image_id.clone(), grid);
        }
    }
    Ok(out)
}
