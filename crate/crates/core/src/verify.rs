//! Automatic acceptance of generated texts against ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Duration;

use rayon::prelude::*;
use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::dataset::{DatasetError, Manifest, Sample};
use crate::geometry::iou;
use crate::response::{parse_response, Verdict};
use crate::textgen::{api_key, http_client, post_json_with_retry, RetryPolicy, DEFAULT_API_KEY_ENV};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("similarity provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("invalid verification config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Label-pair similarity in `[0, 1]`.
pub trait SimilarityProvider: Send + Sync {
    fn name(&self) -> &str;
    fn similarity(&self, a: &str, b: &str) -> Result<f64, VerifyError>;
}

/// Jaccard overlap of lowercase whitespace-separated word sets.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenOverlap;

pub fn token_overlap(a: &str, b: &str) -> f64 {
    let words = |s: &str| s.split_whitespace().map(str::to_lowercase).collect::<BTreeSet<_>>();
    let (a, b) = (words(a), words(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

impl SimilarityProvider for TokenOverlap {
    fn name(&self) -> &str {
        "token_overlap"
    }

    fn similarity(&self, a: &str, b: &str) -> Result<f64, VerifyError> {
        Ok(token_overlap(a, b))
    }
}

/// Cosine similarity of embeddings from `POST {base_url}/embeddings`,
/// clamped to `[0, 1]`.
pub struct RemoteEmbedding {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub retry: RetryPolicy,
    client: Client,
}

impl RemoteEmbedding {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Result<Self, VerifyError> {
        let client = http_client(Duration::from_secs(60)).map_err(|e| VerifyError::ProviderUnavailable(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            retry: RetryPolicy::default(),
            client,
        })
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, VerifyError> {
        let unavailable = |e: String| VerifyError::ProviderUnavailable(e);
        let key = api_key(&self.api_key_env).map_err(|e| unavailable(e.to_string()))?;
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let body = json!({"model": self.model, "input": texts});
        let (resp, _) = post_json_with_retry(&self.client, &url, &key, &body, &self.retry)
            .map_err(|e| unavailable(e.to_string()))?;
        let data = resp.get("data").and_then(Value::as_array).ok_or_else(|| unavailable("no data array".into()))?;
        let vecs: Option<Vec<Vec<f64>>> = data
            .iter()
            .map(|d| d.get("embedding")?.as_array()?.iter().map(Value::as_f64).collect())
            .collect();
        match vecs {
            Some(v) if v.len() == texts.len() => Ok(v),
            _ => Err(unavailable("malformed embeddings response".into())),
        }
    }
}

pub fn cosine_unit(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

impl SimilarityProvider for RemoteEmbedding {
    fn name(&self) -> &str {
        "remote_embedding"
    }

    fn similarity(&self, a: &str, b: &str) -> Result<f64, VerifyError> {
        let v = self.embed(&[a, b])?;
        Ok(cosine_unit(&v[0], &v[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationConfig {
    /// Matched pairs need IoU strictly above this.
    pub iou_threshold: f64,
    /// Matched pairs need label similarity strictly above this.
    pub similarity_threshold: f64,
    pub strict_parse: bool,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.9, similarity_threshold: 0.6, strict_parse: true }
    }
}

impl VerificationConfig {
    pub fn validate(&self) -> Result<(), VerifyError> {
        for (name, v) in [("iou_threshold", self.iou_threshold), ("similarity_threshold", self.similarity_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(VerifyError::InvalidConfig(format!("{name} = {v} is outside (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VerifyReason {
    Ok,
    WrongVerdict,
    CountMismatch,
    UnmatchedInstance,
    FormatError,
}

impl fmt::Display for VerifyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VerifyReason::Ok => "ok",
            VerifyReason::WrongVerdict => "wrong_verdict",
            VerifyReason::CountMismatch => "count_mismatch",
            VerifyReason::UnmatchedInstance => "unmatched_instance",
            VerifyReason::FormatError => "format_error",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub accepted: bool,
    pub reason: VerifyReason,
}

impl VerificationResult {
    fn of(reason: VerifyReason) -> Self {
        Self { accepted: reason == VerifyReason::Ok, reason }
    }
}

/// Whether the bipartite graph `adj[pred] = admissible gts` (each list in
/// preference order) has a matching covering every gt.
pub fn has_perfect_matching(adj: &[Vec<usize>], n_gts: usize) -> bool {
    fn augment(p: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &g in &adj[p] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            if owner[g].is_none_or(|q| augment(q, adj, seen, owner)) {
                owner[g] = Some(p);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_gts];
    let mut matched = 0;
    for p in 0..adj.len() {
        let mut seen = vec![false; n_gts];
        if augment(p, adj, &mut seen, &mut owner) {
            matched += 1;
        }
    }
    matched == n_gts
}

/// Normal samples need a No verdict. Abnormal samples need Yes, as many
/// instances as regions, and a one-to-one pairing where every pair clears
/// both thresholds.
pub fn verify_text(
    sample: &Sample,
    raw_text: &str,
    cfg: &VerificationConfig,
    provider: &dyn SimilarityProvider,
) -> Result<VerificationResult, VerifyError> {
    let Ok(doc) = parse_response(raw_text, cfg.strict_parse) else {
        return Ok(VerificationResult::of(VerifyReason::FormatError));
    };
    let expected = if sample.is_abnormal() { Verdict::Yes } else { Verdict::No };
    if doc.verdict() != expected {
        return Ok(VerificationResult::of(VerifyReason::WrongVerdict));
    }
    if expected == Verdict::No {
        return Ok(VerificationResult::of(VerifyReason::Ok));
    }
    let preds = doc.instances();
    if preds.len() != sample.regions.len() {
        return Ok(VerificationResult::of(VerifyReason::CountMismatch));
    }
    let mut adj = Vec::with_capacity(preds.len());
    for p in preds {
        let mut edges = Vec::new();
        for (g, gt) in sample.regions.iter().enumerate() {
            let overlap = iou(p.bbox(), gt.bbox());
            if overlap > cfg.iou_threshold && provider.similarity(p.label(), gt.label())? > cfg.similarity_threshold {
                edges.push((overlap, g));
            }
        }
        edges.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        adj.push(edges.into_iter().map(|(_, g)| g).collect::<Vec<_>>());
    }
    let reason = if has_perfect_matching(&adj, sample.regions.len()) {
        VerifyReason::Ok
    } else {
        VerifyReason::UnmatchedInstance
    };
    Ok(VerificationResult::of(reason))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub by_reason: BTreeMap<String, usize>,
}

/// Splits `m` into accepted (marked verified) and rejected samples. Samples
/// without generated text count as format errors.
pub fn verify_manifest(
    m: &Manifest,
    cfg: &VerificationConfig,
    provider: &dyn SimilarityProvider,
) -> Result<(Manifest, Manifest, VerificationReport), VerifyError> {
    cfg.validate()?;
    let results = m
        .samples()
        .par_iter()
        .map(|s| match &s.generated_text {
            Some(t) => verify_text(s, t, cfg, provider),
            None => Ok(VerificationResult::of(VerifyReason::FormatError)),
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut report = VerificationReport { total: m.len(), ..Default::default() };
    let (mut accepted, mut rejected) = (Vec::new(), Vec::new());
    for (s, r) in m.samples().iter().zip(results) {
        *report.by_reason.entry(r.reason.to_string()).or_default() += 1;
        let mut s = s.clone();
        s.verified = r.accepted;
        if r.accepted {
            accepted.push(s);
        } else {
            rejected.push(s);
        }
    }
    report.accepted = accepted.len();
    report.rejected = rejected.len();
    Ok((Manifest::new(accepted)?, Manifest::new(rejected)?, report))
}
