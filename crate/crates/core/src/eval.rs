//! Image-level detection and box-level localization scoring.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::dataset::{write_atomic, Manifest, Sample, SampleLabel};
use crate::geometry::{binarize, connected_components, match_boxes_with, nms, IouCriterion, ScoreMap, ScoredBox};
use crate::response::{parse_response, AnomalyInstance, Verdict};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no outcomes to score")]
    EmptyInput,
    #[error("no ground truth for sample {0:?}")]
    MissingGroundTruth(String),
    #[error("responses reference unknown sample ids: {0:?}")]
    UnmatchedSampleIds(Vec<String>),
    #[error("score maps do not line up with the manifest: {0}")]
    ShapeMismatch(String),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

/// One prediction for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub sample_id: String,
    pub verdict: Verdict,
    pub gt_label: SampleLabel,
    pub instances: Vec<AnomalyInstance>,
}

/// Image-level localization success rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizationRule {
    /// Every ground-truth region matched one-to-one.
    #[default]
    AllRegions,
    /// At least one region matched.
    AnyRegion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// A predicted box is correct at IoU >= this.
    pub localization_iou: f64,
    pub rule: LocalizationRule,
    /// Suppression threshold for score-map boxes in the sweep.
    pub nms_iou: f64,
    pub strict_parse: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { localization_iou: 0.1, rule: LocalizationRule::AllRegions, nms_iou: 0.5, strict_parse: false }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (name, v) in [("localization_iou", self.localization_iou), ("nms_iou", self.nms_iou)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(EvalError::InvalidConfig(format!("{name} = {v} is outside (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

/// Ratios with a zero denominator are reported as 0 and flagged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub recall_undefined: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub precision_undefined: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl Confusion {
    /// Accuracy uses every scored image as denominator.
    pub fn metrics(&self, images: usize) -> Metrics {
        let (accuracy, _) = ratio(self.tp + self.tn, images);
        let (recall, recall_undefined) = ratio(self.tp, self.tp + self.fn_);
        let (precision, precision_undefined) = ratio(self.tp, self.tp + self.fp);
        Metrics { accuracy, recall, precision, recall_undefined, precision_undefined }
    }
}

pub fn detection_confusion(outcomes: &[DetectionOutcome]) -> Confusion {
    let mut c = Confusion::default();
    for o in outcomes {
        match (o.gt_label, o.verdict) {
            (SampleLabel::Abnormal, Verdict::Yes) => c.tp += 1,
            (SampleLabel::Normal, Verdict::Yes) => c.fp += 1,
            (SampleLabel::Abnormal, Verdict::No) => c.fn_ += 1,
            (SampleLabel::Normal, Verdict::No) => c.tn += 1,
        }
    }
    c
}

pub fn detection_metrics(outcomes: &[DetectionOutcome]) -> Result<Metrics, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(detection_confusion(outcomes).metrics(outcomes.len()))
}

/// Whether `o` localizes the regions of `gt` under `rule`.
pub fn localizes(o: &DetectionOutcome, gt: &Sample, iou_threshold: f64, rule: LocalizationRule) -> bool {
    if o.verdict != Verdict::Yes || !gt.is_abnormal() {
        return false;
    }
    let preds: Vec<_> = o.instances.iter().map(|i| *i.bbox()).collect();
    let gts: Vec<_> = gt.regions.iter().map(|r| *r.bbox()).collect();
    let m = match_boxes_with(&preds, &gts, IouCriterion::AtLeast(iou_threshold));
    match rule {
        LocalizationRule::AllRegions => m.unmatched_gts.is_empty(),
        LocalizationRule::AnyRegion => !m.pairs.is_empty(),
    }
}

/// TP: abnormal, Yes, localized. FP: normal with Yes, or abnormal with Yes
/// that fails to localize. FN: abnormal and not TP. TN: normal with No.
pub fn localization_confusion(
    outcomes: &[DetectionOutcome],
    gt: &Manifest,
    iou_threshold: f64,
    rule: LocalizationRule,
) -> Result<Confusion, EvalError> {
    let mut c = Confusion::default();
    for o in outcomes {
        let s = gt.get(&o.sample_id).ok_or_else(|| EvalError::MissingGroundTruth(o.sample_id.clone()))?;
        let hit = localizes(o, s, iou_threshold, rule);
        match (s.is_abnormal(), o.verdict) {
            (true, _) if hit => c.tp += 1,
            (true, Verdict::Yes) => {
                c.fp += 1;
                c.fn_ += 1;
            }
            (true, Verdict::No) => c.fn_ += 1,
            (false, Verdict::Yes) => c.fp += 1,
            (false, Verdict::No) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn localization_metrics(
    outcomes: &[DetectionOutcome],
    gt: &Manifest,
    iou_threshold: f64,
    rule: LocalizationRule,
) -> Result<Metrics, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(localization_confusion(outcomes, gt, iou_threshold, rule)?.metrics(outcomes.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub images: usize,
    pub detection: Metrics,
    pub localization: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub localization_iou: f64,
    pub rule: LocalizationRule,
    /// Keyed by sample category.
    pub classes: BTreeMap<String, ClassReport>,
    /// Unweighted mean over classes.
    pub dataset: ClassReport,
}

fn mean_metrics<'a>(ms: impl Iterator<Item = &'a Metrics>) -> Metrics {
    let ms: Vec<_> = ms.collect();
    let n = ms.len() as f64;
    Metrics {
        accuracy: ms.iter().map(|m| m.accuracy).sum::<f64>() / n,
        recall: ms.iter().map(|m| m.recall).sum::<f64>() / n,
        precision: ms.iter().map(|m| m.precision).sum::<f64>() / n,
        recall_undefined: ms.iter().any(|m| m.recall_undefined),
        precision_undefined: ms.iter().any(|m| m.precision_undefined),
    }
}

/// Per-category metrics plus their unweighted mean.
pub fn build_report(outcomes: &[DetectionOutcome], gt: &Manifest, cfg: &EvalConfig) -> Result<MetricReport, EvalError> {
    cfg.validate()?;
    if outcomes.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut by_class: BTreeMap<String, Vec<DetectionOutcome>> = BTreeMap::new();
    for o in outcomes {
        let s = gt.get(&o.sample_id).ok_or_else(|| EvalError::MissingGroundTruth(o.sample_id.clone()))?;
        by_class.entry(s.category.clone()).or_default().push(o.clone());
    }
    let mut classes = BTreeMap::new();
    for (name, os) in by_class {
        let report = ClassReport {
            images: os.len(),
            detection: detection_metrics(&os)?,
            localization: localization_metrics(&os, gt, cfg.localization_iou, cfg.rule)?,
        };
        classes.insert(name, report);
    }
    let dataset = ClassReport {
        images: outcomes.len(),
        detection: mean_metrics(classes.values().map(|c| &c.detection)),
        localization: mean_metrics(classes.values().map(|c| &c.localization)),
    };
    Ok(MetricReport { localization_iou: cfg.localization_iou, rule: cfg.rule, classes, dataset })
}

/// Model output for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub sample_id: String,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub category: String,
    pub gt_label: SampleLabel,
    pub verdict: Verdict,
    pub parsed: bool,
    pub detection_correct: bool,
    pub localized: bool,
}

/// Parses a response into an outcome; unparseable text counts as No.
pub fn outcome_from_text(sample: &Sample, raw: &str, strict: bool) -> (DetectionOutcome, bool) {
    let (verdict, instances, parsed) = match parse_response(raw, strict) {
        Ok(doc) => (doc.verdict(), doc.instances().to_vec(), true),
        Err(_) => (Verdict::No, Vec::new(), false),
    };
    let o = DetectionOutcome { sample_id: sample.sample_id.clone(), verdict, gt_label: sample.label, instances };
    (o, parsed)
}

/// Scores every ground-truth sample. Samples without a response are scored
/// as No; responses for unknown ids are an error.
pub fn evaluate_run(
    responses: &[ResponseRecord],
    gt: &Manifest,
    cfg: &EvalConfig,
) -> Result<(MetricReport, Vec<SampleRecord>), EvalError> {
    let unknown: Vec<String> =
        responses.iter().filter(|r| gt.get(&r.sample_id).is_none()).map(|r| r.sample_id.clone()).collect();
    if !unknown.is_empty() {
        return Err(EvalError::UnmatchedSampleIds(unknown));
    }
    let by_id: HashMap<&str, &str> = responses.iter().map(|r| (r.sample_id.as_str(), r.raw_text.as_str())).collect();
    let mut outcomes = Vec::with_capacity(gt.len());
    let mut records = Vec::with_capacity(gt.len());
    for s in gt.samples() {
        let raw = by_id.get(s.sample_id.as_str()).copied().unwrap_or("");
        let (o, parsed) = outcome_from_text(s, raw, cfg.strict_parse);
        records.push(SampleRecord {
            sample_id: s.sample_id.clone(),
            category: s.category.clone(),
            gt_label: s.label,
            verdict: o.verdict,
            parsed,
            detection_correct: (o.verdict == Verdict::Yes) == s.is_abnormal(),
            localized: localizes(&o, s, cfg.localization_iou, cfg.rule),
        });
        outcomes.push(o);
    }
    Ok((build_report(&outcomes, gt, cfg)?, records))
}

pub fn read_responses(path: &Path) -> Result<Vec<ResponseRecord>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// One line per class, then one dataset line.
pub fn render_report(report: &MetricReport) -> String {
    let mut out = String::new();
    let mut line = |v: serde_json::Value| {
        out.push_str(&v.to_string());
        out.push('\n');
    };
    for (name, c) in &report.classes {
        line(json!({"scope": "class", "class": name, "images": c.images,
            "detection": c.detection, "localization": c.localization,
            "localization_iou": report.localization_iou}));
    }
    let d = &report.dataset;
    line(json!({"scope": "dataset", "classes": report.classes.len(), "images": d.images,
        "detection": d.detection, "localization": d.localization,
        "localization_iou": report.localization_iou, "rule": report.rule}));
    out
}

pub fn write_report(report: &MetricReport, path: &Path) -> Result<(), EvalError> {
    write_atomic(path, render_report(report).as_bytes())
        .map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
}

pub const SWEEP_THRESHOLDS: usize = 11;

/// `i / 10` for `i` in `0..=10`.
pub fn sweep_thresholds() -> Vec<f64> {
    (0..SWEEP_THRESHOLDS).map(|i| i as f64 / 10.0).collect()
}

/// Boxes of the connected regions scoring at least `t`, scored by their
/// in-box maximum and suppressed with NMS.
pub fn boxes_from_scores(map: &ScoreMap, t: f64, nms_iou: f64) -> Vec<ScoredBox> {
    let boxes: Vec<ScoredBox> = connected_components(&binarize(map, t))
        .into_iter()
        .map(|b| ScoredBox::new(b, map.max_in(&b).clamp(0.0, 1.0)).expect("clamped score"))
        .collect();
    nms(&boxes, nms_iou)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub detection_accuracy: f64,
    pub localization_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_threshold: f64,
    pub report: MetricReport,
    pub points: Vec<SweepPoint>,
}

/// Scores per-sample anomaly maps at every sweep threshold and keeps the
/// best by dataset detection accuracy, then localization accuracy, then the
/// lower threshold.
pub fn threshold_sweep(
    score_maps: &HashMap<String, ScoreMap>,
    gt: &Manifest,
    cfg: &EvalConfig,
) -> Result<SweepResult, EvalError> {
    cfg.validate()?;
    if gt.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if let Some(s) = gt.samples().iter().find(|s| !score_maps.contains_key(&s.sample_id)) {
        return Err(EvalError::ShapeMismatch(format!("no score map for {:?}", s.sample_id)));
    }
    if score_maps.len() != gt.len() {
        return Err(EvalError::ShapeMismatch(format!("{} maps for {} samples", score_maps.len(), gt.len())));
    }
    if let Some((id, _)) = score_maps.iter().find(|(_, m)| m.data().iter().any(|v| !(0.0..=1.0).contains(v))) {
        return Err(EvalError::ShapeMismatch(format!("score map {id:?} has values outside [0, 1]")));
    }

    let mut best: Option<(f64, MetricReport)> = None;
    let mut points = Vec::with_capacity(SWEEP_THRESHOLDS);
    for t in sweep_thresholds() {
        let outcomes: Vec<DetectionOutcome> = gt
            .samples()
            .iter()
            .map(|s| {
                let kept = boxes_from_scores(&score_maps[&s.sample_id], t, cfg.nms_iou);
                let instances: Vec<_> = kept
                    .iter()
                    .map(|b| AnomalyInstance::new(b.bbox, "anomaly").expect("constant label"))
                    .collect();
                let verdict = if instances.is_empty() { Verdict::No } else { Verdict::Yes };
                DetectionOutcome { sample_id: s.sample_id.clone(), verdict, gt_label: s.label, instances }
            })
            .collect();
        let report = build_report(&outcomes, gt, cfg)?;
        let (det, loc) = (report.dataset.detection.accuracy, report.dataset.localization.accuracy);
        points.push(SweepPoint { threshold: t, detection_accuracy: det, localization_accuracy: loc });
        let better = match &best {
            None => true,
            Some((_, b)) => {
                let (bd, bl) = (b.dataset.detection.accuracy, b.dataset.localization.accuracy);
                det > bd || (det == bd && loc > bl)
            }
        };
        if better {
            best = Some((t, report));
        }
    }
    let (best_threshold, report) = best.expect("at least one threshold");
    Ok(SweepResult { best_threshold, report, points })
}
