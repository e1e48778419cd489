use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    alignment_degree, block_histograms, build_codebook, BlockHistograms, Codebook, FeatureGrid, KlDirection,
    RetrievalError,
};
use crate::dataset::{Manifest, Sample};

/// Index file magic. Layout, little-endian:
///
/// ```text
/// "ADFIDX1"  S:u32 N_c:u32 tau:u32 K:u32 C_p:u32
/// centers    N_c * C_p float32
/// repeated   id_len:u32, id bytes (UTF-8), S*S*N_c float32
/// ```
pub const INDEX_MAGIC: &[u8; 7] = b"ADFIDX1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    /// Grid side `S`.
    pub grid: usize,
    /// Codebook size `N_c`.
    pub n_centers: usize,
    /// Number of largest block divergences discarded (`tau`).
    pub trim: usize,
    /// Neighbors retrieved (`K`).
    pub top_k: usize,
    pub seed: u64,
    pub direction: KlDirection,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self { grid: 5, n_centers: 12, trim: 5, top_k: 10, seed: 0, direction: KlDirection::ReferenceToQuery }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.grid == 0 || self.n_centers == 0 || self.top_k == 0 {
            return Err(RetrievalError::InvalidParams("S, N_c and K must be >= 1".into()));
        }
        if self.trim >= self.grid * self.grid {
            return Err(RetrievalError::InvalidParams(format!(
                "tau {} must be smaller than S^2 = {}",
                self.trim,
                self.grid * self.grid
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub image_id: String,
    pub degree: f64,
}

/// Codebook plus per-image block histograms of the normal pool.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentIndex {
    params: RetrievalParams,
    codebook: Codebook,
    entries: Vec<BlockHistograms>,
}

impl AlignmentIndex {
    pub fn from_parts(
        params: RetrievalParams,
        codebook: Codebook,
        entries: Vec<BlockHistograms>,
    ) -> Result<Self, RetrievalError> {
        params.validate()?;
        if codebook.len() != params.n_centers {
            return Err(RetrievalError::DimensionMismatch(format!(
                "codebook has {} centers, params say {}",
                codebook.len(),
                params.n_centers
            )));
        }
        if let Some(bad) = entries.iter().find(|e| e.grid() != params.grid || e.bins() != params.n_centers) {
            return Err(RetrievalError::DimensionMismatch(format!("entry {:?} has wrong shape", bad.image_id())));
        }
        Ok(Self { params, codebook, entries })
    }

    pub fn params(&self) -> &RetrievalParams {
        &self.params
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn entries(&self) -> &[BlockHistograms] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overrides the query-time KL direction.
    pub fn with_direction(mut self, direction: KlDirection) -> Self {
        self.params.direction = direction;
        self
    }

    pub fn histogram(&self, grid: &FeatureGrid) -> Result<BlockHistograms, RetrievalError> {
        block_histograms(grid, &self.codebook, self.params.grid)
    }

    /// Every entry ordered by ascending alignment degree, ties by image id.
    pub fn rank(&self, query: &BlockHistograms) -> Result<Vec<Neighbor>, RetrievalError> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let mut out = self
            .entries
            .par_iter()
            .map(|e| {
                alignment_degree(query, e, self.params.trim, self.params.direction)
                    .map(|degree| Neighbor { image_id: e.image_id().to_string(), degree })
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.sort_by(|a, b| a.degree.total_cmp(&b.degree).then_with(|| a.image_id.cmp(&b.image_id)));
        Ok(out)
    }

    /// The `k` most aligned entries for `query`.
    pub fn retrieve_topk(&self, query: &FeatureGrid, k: usize) -> Result<Vec<Neighbor>, RetrievalError> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if k == 0 || k > self.entries.len() {
            return Err(RetrievalError::InvalidParams(format!(
                "k = {k} outside 1..={}",
                self.entries.len()
            )));
        }
        let mut ranked = self.rank(&self.histogram(query)?)?;
        ranked.truncate(k);
        Ok(ranked)
    }
}

/// Clusters the pooled patches of `normals` and histograms each of them.
pub fn build_index(normals: &[FeatureGrid], params: RetrievalParams) -> Result<AlignmentIndex, RetrievalError> {
    params.validate()?;
    if normals.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let codebook = build_codebook(normals, params.n_centers, params.seed)?;
    let entries = normals
        .par_iter()
        .map(|g| block_histograms(g, &codebook, params.grid))
        .collect::<Result<Vec<_>, _>>()?;
    AlignmentIndex::from_parts(params, codebook, entries)
}

/// Sets every sample's reference to its most aligned normal image, never the
/// sample itself. Index entry ids are sample ids; the stored reference is the
/// matching sample's `image_path` (or the raw id when the manifest lacks it).
pub fn assign_references(
    m: &Manifest,
    index: &AlignmentIndex,
    features_by_id: &HashMap<String, FeatureGrid>,
) -> Result<Manifest, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let path_of: HashMap<&str, &str> =
        m.samples().iter().map(|s| (s.sample_id.as_str(), s.image_path.as_str())).collect();

    let refs = m
        .samples()
        .par_iter()
        .map(|s| {
            let grid = features_by_id
                .get(&s.sample_id)
                .ok_or_else(|| RetrievalError::MissingFeatures(s.sample_id.clone()))?;
            let ranked = index.rank(&index.histogram(grid)?)?;
            let best = ranked
                .into_iter()
                .find(|n| n.image_id != s.sample_id)
                .ok_or_else(|| RetrievalError::NoCandidate(s.sample_id.clone()))?;
            Ok(path_of.get(best.image_id.as_str()).map_or(best.image_id.clone(), |p| p.to_string()))
        })
        .collect::<Result<Vec<String>, RetrievalError>>()?;

    let samples: Vec<Sample> = m
        .samples()
        .iter()
        .zip(refs)
        .map(|(s, r)| Sample { reference_image_path: Some(r), ..s.clone() })
        .collect();
    Manifest::new(samples).map_err(|e| RetrievalError::InvalidParams(e.to_string()))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), RetrievalError> {
    let v = u32::try_from(v).map_err(|_| RetrievalError::InvalidParams(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_index(index: &AlignmentIndex) -> Result<Vec<u8>, RetrievalError> {
    let p = &index.params;
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    for v in [p.grid, p.n_centers, p.trim, p.top_k, index.codebook.dim()] {
        put_u32(&mut out, v)?;
    }
    for v in index.codebook.centers().iter().flatten() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for e in &index.entries {
        put_u32(&mut out, e.image_id().len())?;
        out.extend_from_slice(e.image_id().as_bytes());
        for v in e.rows().flatten() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrievalError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| RetrievalError::Malformed("index file truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, RetrievalError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, RetrievalError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| RetrievalError::Malformed("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes")))).collect())
    }
}

/// Decodes an index. Histogram rows are renormalized after the float32
/// round trip; the seed is not stored and the KL direction comes from
/// `direction`.
pub fn decode_index(bytes: &[u8], direction: KlDirection) -> Result<AlignmentIndex, RetrievalError> {
    if bytes.len() < INDEX_MAGIC.len() || &bytes[..INDEX_MAGIC.len()] != INDEX_MAGIC {
        return Err(RetrievalError::BadMagic);
    }
    let mut r = Reader { bytes, at: INDEX_MAGIC.len() };
    let (grid, n_c, trim, top_k, dim) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let params = RetrievalParams { grid, n_centers: n_c, trim, top_k, seed: 0, direction };
    params.validate()?;
    let flat = r.f32s(n_c * dim)?;
    let codebook = Codebook::new(flat.chunks(dim.max(1)).map(<[f64]>::to_vec).collect())?;
    let mut entries = Vec::new();
    while r.at < bytes.len() {
        let len = r.u32()?;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| RetrievalError::Malformed("image id is not UTF-8".into()))?
            .to_string();
        let rows = r.f32s(grid * grid * n_c)?;
        entries.push(BlockHistograms::new(id, grid, n_c, rows)?);
    }
    AlignmentIndex::from_parts(params, codebook, entries)
}

pub fn save_index(index: &AlignmentIndex, path: &Path) -> Result<(), RetrievalError> {
    let bytes = encode_index(index)?;
    fs::write(path, bytes).map_err(|source| RetrievalError::Io { path: path.to_path_buf(), source })
}

pub fn load_index(path: &Path, direction: KlDirection) -> Result<AlignmentIndex, RetrievalError> {
    let bytes = fs::read(path).map_err(|source| RetrievalError::Io { path: path.to_path_buf(), source })?;
    decode_index(&bytes, direction)
}
