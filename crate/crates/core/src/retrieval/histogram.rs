use serde::{Deserialize, Serialize};

use super::{Codebook, FeatureGrid, RetrievalError};

/// Additive smoothing applied to every bin before the KL divergence.
pub const KL_SMOOTHING: f64 = 1e-8;

/// One L1-normalized codebook histogram per grid cell, row `u * S + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockHistograms {
    image_id: String,
    grid: usize,
    bins: usize,
    rows: Vec<f64>,
}

impl BlockHistograms {
    /// Rows are renormalized to unit L1 mass.
    pub fn new(image_id: impl Into<String>, grid: usize, bins: usize, rows: Vec<f64>) -> Result<Self, RetrievalError> {
        if grid == 0 || bins == 0 || rows.len() != grid * grid * bins {
            return Err(RetrievalError::DimensionMismatch(format!(
                "{} histogram values for a {grid}x{grid} grid of {bins} bins",
                rows.len()
            )));
        }
        let mut rows = rows;
        for row in rows.chunks_exact_mut(bins) {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(RetrievalError::InvalidParams("histogram entries must be finite and >= 0".into()));
            }
            let mass: f64 = row.iter().sum();
            if mass <= 0.0 {
                return Err(RetrievalError::InvalidParams("histogram row has zero mass".into()));
            }
            row.iter_mut().for_each(|v| *v /= mass);
        }
        Ok(Self { image_id: image_id.into(), grid, bins, rows })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn blocks(&self) -> usize {
        self.grid * self.grid
    }

    pub fn row(&self, block: usize) -> &[f64] {
        &self.rows[block * self.bins..(block + 1) * self.bins]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks_exact(self.bins)
    }
}

/// Divides `f` into an `s x s` grid (edge-replicating rows and columns when
/// the size is not divisible by `s`) and histograms nearest-center
/// assignments per cell.
pub fn block_histograms(f: &FeatureGrid, cb: &Codebook, s: usize) -> Result<BlockHistograms, RetrievalError> {
    if s == 0 {
        return Err(RetrievalError::InvalidParams("grid size must be >= 1".into()));
    }
    if f.channels() != cb.dim() {
        return Err(RetrievalError::DimensionMismatch(format!(
            "feature channels {} vs codebook dimension {}",
            f.channels(),
            cb.dim()
        )));
    }
    let padded_h = f.height().div_ceil(s) * s;
    let padded_w = f.width().div_ceil(s) * s;
    let (bh, bw) = (padded_h / s, padded_w / s);
    let n_c = cb.len();

    let assignments: Vec<usize> = (0..f.height())
        .flat_map(|y| (0..f.width()).map(move |x| (y, x)))
        .map(|(y, x)| cb.assign(f.patch(y, x)))
        .collect();

    let mut counts = vec![0.0f64; s * s * n_c];
    for py in 0..padded_h {
        let sy = py.min(f.height() - 1);
        for px in 0..padded_w {
            let sx = px.min(f.width() - 1);
            let block = (py / bh) * s + px / bw;
            counts[block * n_c + assignments[sy * f.width() + sx]] += 1.0;
        }
    }
    BlockHistograms::new(f.image_id(), s, n_c, counts)
}

/// Argument order of the block KL divergence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(reference || query)`.
    #[default]
    ReferenceToQuery,
    /// `KL(query || reference)`.
    QueryToReference,
}

fn smoothed_kl(p: &[f64], q: &[f64]) -> f64 {
    let z = 1.0 + KL_SMOOTHING * p.len() as f64;
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let ps = (pi + KL_SMOOTHING) / z;
            let qs = (qi + KL_SMOOTHING) / z;
            ps * (ps / qs).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Per-block KL divergences, in block order.
pub fn block_divergences(
    query: &BlockHistograms,
    reference: &BlockHistograms,
    direction: KlDirection,
) -> Result<Vec<f64>, RetrievalError> {
    if query.grid != reference.grid || query.bins != reference.bins {
        return Err(RetrievalError::DimensionMismatch(format!(
            "query {}x{}x{} vs reference {}x{}x{}",
            query.grid, query.grid, query.bins, reference.grid, reference.grid, reference.bins
        )));
    }
    Ok(query
        .rows()
        .zip(reference.rows())
        .map(|(q, r)| match direction {
            KlDirection::ReferenceToQuery => smoothed_kl(r, q),
            KlDirection::QueryToReference => smoothed_kl(q, r),
        })
        .collect())
}

/// Mean of the `S^2 - tau` smallest block divergences.
pub fn alignment_degree(
    query: &BlockHistograms,
    reference: &BlockHistograms,
    tau: usize,
    direction: KlDirection,
) -> Result<f64, RetrievalError> {
    let mut d = block_divergences(query, reference, direction)?;
    if tau >= d.len() {
        return Err(RetrievalError::InvalidParams(format!(
            "tau {tau} must be smaller than the block count {}",
            d.len()
        )));
    }
    d.sort_by(f64::total_cmp);
    let keep = d.len() - tau;
    Ok(d[..keep].iter().sum::<f64>() / keep as f64)
}
