//! Spatially-aligned normal reference retrieval.
//!
//! Patch features of normal images are clustered into a small codebook; each
//! image is summarized by one bag-of-words histogram per cell of an `S x S`
//! grid. Two images are compared block by block with a smoothed KL
//! divergence, and the largest `tau` block divergences are discarded before
//! averaging. The normal image with the lowest score is the reference.

mod codebook;
mod features;
mod histogram;
mod index;

pub use codebook::{build_codebook, build_codebook_with, nearest_center, Codebook, KMeansParams};
pub use features::{
    decode_feature_bytes, encode_feature_bytes, load_feature_dir, read_feature_file,
    write_feature_file, FeatureGrid, FEATURE_DTYPE_F32, FEATURE_EXTENSION, FEATURE_MAGIC,
};
pub use histogram::{alignment_degree, block_divergences, block_histograms, BlockHistograms, KlDirection, KL_SMOOTHING};
pub use index::{
    assign_references, build_index, decode_index, encode_index, load_index, save_index, AlignmentIndex, Neighbor,
    RetrievalParams, INDEX_MAGIC,
};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("invalid feature grid: {0}")]
    InvalidGrid(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("no feature grid for sample {0:?}")]
    MissingFeatures(String),
    #[error("no reference candidate for sample {0:?}")]
    NoCandidate(String),
}
