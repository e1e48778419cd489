use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{FeatureGrid, RetrievalError};

/// K-means cluster centers over patch feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    centers: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(centers: Vec<Vec<f64>>) -> Result<Self, RetrievalError> {
        let dim = centers.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(RetrievalError::InvalidParams("codebook needs at least one non-empty center".into()));
        }
        if centers.iter().any(|c| c.len() != dim) {
            return Err(RetrievalError::DimensionMismatch("codebook centers differ in length".into()));
        }
        if centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(RetrievalError::InvalidParams("non-finite codebook center".into()));
        }
        for i in 0..centers.len() {
            for j in 0..i {
                if centers[i] == centers[j] {
                    return Err(RetrievalError::InsufficientData(format!(
                        "codebook centers {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(Self { dim, centers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Index of the nearest center; ties go to the lowest index.
    pub fn assign(&self, v: &[f32]) -> usize {
        nearest_center(&self.centers, v.iter().map(|&x| f64::from(x)))
    }
}

fn sq_dist<I: Iterator<Item = f64>>(center: &[f64], v: I) -> f64 {
    center.iter().zip(v).map(|(c, x)| (c - x) * (c - x)).sum()
}

/// Nearest center by squared Euclidean distance; ties go to the lowest index.
pub fn nearest_center<I>(centers: &[Vec<f64>], v: I) -> usize
where
    I: Iterator<Item = f64> + Clone,
{
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(c, v.clone());
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Stop once no center moves farther than this (Euclidean).
    pub shift_tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { max_iters: 100, shift_tol: 1e-6 }
    }
}

/// Lloyd's k-means over all patch vectors of all grids, seeded k-means++
/// initialization.
pub fn build_codebook(features: &[FeatureGrid], n_c: usize, seed: u64) -> Result<Codebook, RetrievalError> {
    build_codebook_with(features, n_c, seed, KMeansParams::default())
}

pub fn build_codebook_with(
    features: &[FeatureGrid],
    n_c: usize,
    seed: u64,
    params: KMeansParams,
) -> Result<Codebook, RetrievalError> {
    if n_c == 0 {
        return Err(RetrievalError::InvalidParams("n_c must be >= 1".into()));
    }
    let dim = features.first().map(FeatureGrid::channels).unwrap_or(0);
    if features.iter().any(|f| f.channels() != dim) {
        return Err(RetrievalError::DimensionMismatch("feature grids differ in channel count".into()));
    }
    let points: Vec<Vec<f64>> = features
        .iter()
        .flat_map(|f| f.patches())
        .map(|p| p.iter().map(|&x| f64::from(x)).collect())
        .collect();
    if points.len() < n_c {
        return Err(RetrievalError::InsufficientData(format!(
            "{} patch vectors for {n_c} centers",
            points.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp_init(&points, n_c, &mut rng)?;

    for _ in 0..params.max_iters {
        let labels: Vec<usize> = points
            .par_iter()
            .map(|p| nearest_center(&centers, p.iter().copied()))
            .collect();
        let mut sums = vec![vec![0.0; dim]; n_c];
        let mut counts = vec![0usize; n_c];
        for (p, &k) in points.iter().zip(&labels) {
            counts[k] += 1;
            for (s, x) in sums[k].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift = 0.0f64;
        for k in 0..n_c {
            // An empty cluster keeps its previous center.
            if counts[k] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            shift = shift.max(sq_dist(&centers[k], new.iter().copied()).sqrt());
            centers[k] = new;
        }
        if shift < params.shift_tol {
            break;
        }
    }
    Codebook::new(centers)
}

fn kmeans_pp_init(points: &[Vec<f64>], n_c: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>, RetrievalError> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(&centers[0], p.iter().copied())).collect();
    while centers.len() < n_c {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(RetrievalError::InsufficientData(format!(
                "fewer than {n_c} distinct patch vectors"
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = points.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if acc > target && d > 0.0 {
                pick = i;
                break;
            }
        }
        // Guard against landing on an already-chosen point through rounding.
        if d2[pick] == 0.0 {
            pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
        }
        let c = points[pick].clone();
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(sq_dist(&c, p.iter().copied()));
        }
        centers.push(c);
    }
    Ok(centers)
}
