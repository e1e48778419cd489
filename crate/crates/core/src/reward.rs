//! Rule-based rewards: a binary result reward and a per-missed-region
//! consistency penalty.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::geometry::match_boxes;
use crate::response::{parse_response, ResponseDoc, Verdict};

#[derive(Debug, Error)]
#[error("invalid reward config: {0}")]
pub struct RewardConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// A prediction matches a region when IoU is strictly above this.
    pub match_iou: f64,
    pub penalty_per_miss: f64,
    pub format_failure_reward: f64,
    /// Also penalize missed regions when an abnormal sample gets a No.
    pub penalize_no_verdict: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { match_iou: 0.5, penalty_per_miss: 0.2, format_failure_reward: 0.0, penalize_no_verdict: false }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        if !(self.match_iou > 0.0 && self.match_iou < 1.0) {
            return Err(RewardConfigError(format!("match_iou = {} is outside (0, 1)", self.match_iou)));
        }
        if !(self.penalty_per_miss >= 0.0 && self.penalty_per_miss.is_finite()) {
            return Err(RewardConfigError(format!("penalty_per_miss = {} must be >= 0", self.penalty_per_miss)));
        }
        if !self.format_failure_reward.is_finite() {
            return Err(RewardConfigError("format_failure_reward must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub result_reward: f64,
    pub consistency_penalty: f64,
    pub total: f64,
    pub unmatched_gt_count: usize,
    pub format_failure: bool,
}

/// 1 when the verdict agrees with the sample label, else 0.
pub fn result_reward(sample: &Sample, doc: &ResponseDoc) -> f64 {
    let correct = match doc.verdict() {
        Verdict::Yes => sample.is_abnormal(),
        Verdict::No => !sample.is_abnormal(),
    };
    if correct {
        1.0
    } else {
        0.0
    }
}

/// Ground-truth regions left unmatched by a one-to-one matching at
/// IoU > `match_iou`.
pub fn unmatched_regions(sample: &Sample, doc: &ResponseDoc, match_iou: f64) -> usize {
    let gts: Vec<_> = sample.regions.iter().map(|r| *r.bbox()).collect();
    match_boxes(&doc.boxes(), &gts, match_iou).unmatched_gts.len()
}

/// `-penalty_per_miss * N` for abnormal samples; 0 for normal ones.
pub fn consistency_penalty(sample: &Sample, doc: &ResponseDoc, cfg: &RewardConfig) -> f64 {
    if !sample.is_abnormal() {
        return 0.0;
    }
    -cfg.penalty_per_miss * unmatched_regions(sample, doc, cfg.match_iou) as f64
}

/// Lenient parse, then result reward plus penalty. The penalty only applies
/// to Yes answers on abnormal samples unless `penalize_no_verdict` is set.
/// Unparseable text earns `format_failure_reward`.
pub fn total_reward(sample: &Sample, raw_text: &str, cfg: &RewardConfig) -> RewardBreakdown {
    let Ok(doc) = parse_response(raw_text, false) else {
        return RewardBreakdown {
            result_reward: 0.0,
            consistency_penalty: 0.0,
            total: cfg.format_failure_reward,
            unmatched_gt_count: 0,
            format_failure: true,
        };
    };
    let result = result_reward(sample, &doc);
    let applies = sample.is_abnormal() && (doc.verdict() == Verdict::Yes || cfg.penalize_no_verdict);
    let (n, penalty) = if applies {
        let n = unmatched_regions(sample, &doc, cfg.match_iou);
        (n, -cfg.penalty_per_miss * n as f64)
    } else {
        (0, 0.0)
    };
    RewardBreakdown {
        result_reward: result,
        consistency_penalty: penalty,
        total: result + penalty,
        unmatched_gt_count: n,
        format_failure: false,
    }
}
