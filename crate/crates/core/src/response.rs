//! The think-then-answer response format.
//!
//! ```text
//! <think>reasoning</think><answer>Yes. {'bbox_2d': [x1, y1, x2, y2], 'label': 'type'}</answer>
//! ```
//!
//! [`parse_response`] turns raw model output into a [`ResponseDoc`],
//! [`render_response`] produces the canonical string, and
//! [`validate_format`] lists every violation without failing.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";
const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Yes,
    No,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Yes => "Yes",
            Verdict::No => "No",
        })
    }
}

/// One anomalous region: a box plus a lowercase type label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawInstance", into = "RawInstance")]
pub struct AnomalyInstance {
    bbox: BBox,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct RawInstance {
    bbox_2d: BBox,
    label: String,
}

impl TryFrom<RawInstance> for AnomalyInstance {
    type Error = InvalidLabel;

    fn try_from(raw: RawInstance) -> Result<Self, Self::Error> {
        AnomalyInstance::new(raw.bbox_2d, &raw.label)
    }
}

impl From<AnomalyInstance> for RawInstance {
    fn from(i: AnomalyInstance) -> Self {
        RawInstance { bbox_2d: i.bbox, label: i.label }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid anomaly label {0:?}")]
pub struct InvalidLabel(pub String);

/// Trims, lowercases and collapses internal whitespace.
pub fn normalize_label(label: &str) -> String {
    label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl AnomalyInstance {
    /// Normalizes `label`; rejects empty labels and labels containing quotes,
    /// braces or angle brackets (they cannot survive a render/parse cycle).
    pub fn new(bbox: BBox, label: &str) -> Result<Self, InvalidLabel> {
        let norm = normalize_label(label);
        let bad = |c: char| matches!(c, '\'' | '"' | '{' | '}' | '<' | '>') || c.is_control();
        if norm.is_empty() || norm.chars().any(bad) {
            return Err(InvalidLabel(label.to_string()));
        }
        Ok(Self { bbox, label: norm })
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

/// A parsed model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseDoc {
    think: String,
    verdict: Verdict,
    instances: Vec<AnomalyInstance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DocError {
    #[error("a No verdict cannot carry anomaly instances")]
    InstancesWithNegativeVerdict,
    #[error("think text contains a reserved tag")]
    TagInThink,
}

impl ResponseDoc {
    pub fn new(
        think: impl Into<String>,
        verdict: Verdict,
        instances: Vec<AnomalyInstance>,
    ) -> Result<Self, DocError> {
        let think = think.into();
        if verdict == Verdict::No && !instances.is_empty() {
            return Err(DocError::InstancesWithNegativeVerdict);
        }
        if TAGS.iter().any(|t| think.contains(t)) {
            return Err(DocError::TagInThink);
        }
        Ok(Self { think, verdict, instances })
    }

    pub fn think(&self) -> &str {
        &self.think
    }

    pub fn verdict(&self) -> Verdict {
        self.verdict
    }

    pub fn instances(&self) -> &[AnomalyInstance] {
        &self.instances
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.instances.iter().map(|i| i.bbox).collect()
    }
}

/// A single problem found in a raw response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    MissingThink,
    UnclosedThink,
    DuplicateThink,
    StrayThinkClose,
    EmptyThink,
    MissingAnswer,
    UnclosedAnswer,
    DuplicateAnswer,
    StrayAnswerClose,
    AnswerBeforeThink,
    MissingVerdict,
    BboxLength(usize),
    NonNumericCoordinate(String),
    DegenerateBox(String),
    InvalidLabel(String),
    IncompleteInstance,
    VerdictWithoutInstances,
    InstancesWithNegativeVerdict,
}

impl Violation {
    pub fn is_consistency(&self) -> bool {
        matches!(self, Violation::VerdictWithoutInstances | Violation::InstancesWithNegativeVerdict)
    }

    /// Violations that make the answer unreadable even in lenient mode.
    fn fatal_when_lenient(&self) -> bool {
        matches!(
            self,
            Violation::MissingAnswer
                | Violation::MissingVerdict
                | Violation::BboxLength(_)
                | Violation::NonNumericCoordinate(_)
                | Violation::DegenerateBox(_)
                | Violation::InvalidLabel(_)
                | Violation::InstancesWithNegativeVerdict
        )
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BboxLength(n) => write!(f, "bbox list has {n} values, expected 4"),
            Violation::NonNumericCoordinate(s) => write!(f, "non-numeric coordinate {s:?}"),
            Violation::DegenerateBox(s) => write!(f, "invalid box {s}"),
            Violation::InvalidLabel(s) => write!(f, "invalid label {s:?}"),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("format error: {0}")]
    Format(Violation),
    #[error("consistency error: {0}")]
    Consistency(Violation),
}

impl ParseError {
    fn from_violation(v: Violation) -> Self {
        if v.is_consistency() {
            ParseError::Consistency(v)
        } else {
            ParseError::Format(v)
        }
    }

    pub fn violation(&self) -> &Violation {
        match self {
            ParseError::Format(v) | ParseError::Consistency(v) => v,
        }
    }
}

/// Outcome of [`validate_format`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatReport {
    pub violations: Vec<Violation>,
}

impl FormatReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Analysis {
    violations: Vec<Violation>,
    think: String,
    verdict: Option<Verdict>,
    instances: Vec<AnomalyInstance>,
}

fn verdict_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").unwrap())
}

fn record_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{[^{}]*\}").unwrap())
}

fn bbox_key_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"['"]bbox_2d['"]\s*:"#).unwrap())
}

fn bbox_list_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"['"]bbox_2d['"]\s*:\s*\[([^\]]*)\]"#).unwrap())
}

fn label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"['"]label['"]\s*:\s*(?:'([^']*)'|"([^"]*)")"#).unwrap())
}

fn label_key_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"['"]label['"]\s*:"#).unwrap())
}

fn parse_coordinate(token: &str) -> Result<i64, Violation> {
    let t = token.trim();
    let value: f64 = t.parse().map_err(|_| Violation::NonNumericCoordinate(t.to_string()))?;
    if !value.is_finite() || value.abs() > i64::MAX as f64 / 2.0 {
        return Err(Violation::NonNumericCoordinate(t.to_string()));
    }
    // f64::round rounds half away from zero.
    Ok(value.round() as i64)
}

fn parse_record(record: &str) -> Option<Result<AnomalyInstance, Violation>> {
    let has_bbox = bbox_key_re().is_match(record);
    let has_label = label_key_re().is_match(record);
    if !has_bbox && !has_label {
        return None;
    }
    if !(has_bbox && has_label) {
        return Some(Err(Violation::IncompleteInstance));
    }
    let Some(list) = bbox_list_re().captures(record) else {
        return Some(Err(Violation::BboxLength(0)));
    };
    let tokens: Vec<&str> = list[1].split(',').collect();
    if tokens.len() != 4 {
        let n = if list[1].trim().is_empty() { 0 } else { tokens.len() };
        return Some(Err(Violation::BboxLength(n)));
    }
    let mut coords = [0i64; 4];
    for (slot, tok) in coords.iter_mut().zip(tokens) {
        match parse_coordinate(tok) {
            Ok(v) => *slot = v,
            Err(e) => return Some(Err(e)),
        }
    }
    let bbox = match BBox::from_signed(coords) {
        Ok(b) => b,
        Err(_) => return Some(Err(Violation::DegenerateBox(format!("{coords:?}")))),
    };
    let Some(label) = label_re().captures(record) else {
        return Some(Err(Violation::IncompleteInstance));
    };
    let text = label.get(1).or_else(|| label.get(2)).map_or("", |m| m.as_str());
    Some(AnomalyInstance::new(bbox, text).map_err(|e| Violation::InvalidLabel(e.0)))
}

fn tag_violations(raw: &str, out: &mut Vec<Violation>) {
    let count = |tag: &str| raw.matches(tag).count();
    let (to, tc, ao, ac) = (count(THINK_OPEN), count(THINK_CLOSE), count(ANSWER_OPEN), count(ANSWER_CLOSE));

    if to == 0 && tc == 0 {
        out.push(Violation::MissingThink);
    } else if to > tc {
        out.push(Violation::UnclosedThink);
    } else if tc > to {
        out.push(Violation::StrayThinkClose);
    } else if to > 1 {
        out.push(Violation::DuplicateThink);
    }

    if ao == 0 && ac == 0 {
        out.push(Violation::MissingAnswer);
    } else if ao > ac {
        out.push(Violation::UnclosedAnswer);
    } else if ac > ao {
        out.push(Violation::StrayAnswerClose);
    } else if ao > 1 {
        out.push(Violation::DuplicateAnswer);
    }

    if let (Some(tc_at), Some(ao_at)) = (raw.find(THINK_CLOSE), raw.find(ANSWER_OPEN)) {
        if ao_at < tc_at {
            out.push(Violation::AnswerBeforeThink);
        }
    }
}

fn analyze(raw: &str) -> Analysis {
    let mut violations = Vec::new();
    tag_violations(raw, &mut violations);

    let mut think = String::new();
    let mut answer_from = 0;
    if let Some(open) = raw.find(THINK_OPEN) {
        let body = open + THINK_OPEN.len();
        match raw[body..].find(THINK_CLOSE) {
            Some(rel) => {
                think = raw[body..body + rel].trim().to_string();
                answer_from = body + rel + THINK_CLOSE.len();
            }
            None => {
                let end = raw[body..].find(ANSWER_OPEN).map_or(raw.len(), |r| body + r);
                think = raw[body..end].trim().to_string();
            }
        }
    }
    if !violations.contains(&Violation::MissingThink) && think.is_empty() {
        violations.push(Violation::EmptyThink);
    }

    let answer = raw[answer_from..].find(ANSWER_OPEN).map(|rel| {
        let body = answer_from + rel + ANSWER_OPEN.len();
        let end = raw[body..].find(ANSWER_CLOSE).map_or(raw.len(), |r| body + r);
        &raw[body..end]
    });

    let mut verdict = None;
    let mut instances = Vec::new();
    match answer {
        None => {
            if !violations.contains(&Violation::MissingAnswer) {
                violations.push(Violation::MissingAnswer);
            }
        }
        Some(answer) => {
            verdict = verdict_re().captures(answer).map(|c| {
                if c[1].eq_ignore_ascii_case("yes") {
                    Verdict::Yes
                } else {
                    Verdict::No
                }
            });
            if verdict.is_none() {
                violations.push(Violation::MissingVerdict);
            }
            for m in record_re().find_iter(answer) {
                match parse_record(m.as_str()) {
                    None => {}
                    Some(Ok(inst)) => instances.push(inst),
                    Some(Err(v)) => violations.push(v),
                }
            }
            match verdict {
                Some(Verdict::Yes) if instances.is_empty() => {
                    violations.push(Violation::VerdictWithoutInstances)
                }
                Some(Verdict::No) if !instances.is_empty() => {
                    violations.push(Violation::InstancesWithNegativeVerdict)
                }
                _ => {}
            }
        }
    }

    Analysis { violations, think, verdict, instances }
}

/// Parses a raw model output.
///
/// Strict mode rejects every format or consistency violation. Lenient mode
/// tolerates tag problems (a missing think block yields empty think text) and
/// a `Yes` verdict without instances, but still requires a readable answer.
pub fn parse_response(raw: &str, strict: bool) -> Result<ResponseDoc, ParseError> {
    let a = analyze(raw);
    let fatal = if strict {
        // Format problems are reported ahead of consistency problems.
        a.violations
            .iter()
            .find(|v| !v.is_consistency())
            .or_else(|| a.violations.first())
    } else {
        a.violations.iter().find(|v| v.fatal_when_lenient())
    };
    if let Some(v) = fatal {
        return Err(ParseError::from_violation(v.clone()));
    }
    let verdict = a.verdict.expect("verdict checked above");
    let think: String = if TAGS.iter().any(|t| a.think.contains(t)) {
        // Only reachable leniently, e.g. nested tags inside an unclosed think.
        TAGS.iter().fold(a.think, |acc, t| acc.replace(t, ""))
    } else {
        a.think
    };
    ResponseDoc::new(think, verdict, a.instances)
        .map_err(|_| ParseError::Consistency(Violation::InstancesWithNegativeVerdict))
}

/// Renders the canonical string form of `doc`.
pub fn render_response(doc: &ResponseDoc) -> String {
    let mut answer = doc.verdict.to_string();
    if !doc.instances.is_empty() {
        let records: Vec<String> = doc
            .instances
            .iter()
            .map(|i| format!("{{'bbox_2d': {}, 'label': '{}'}}", i.bbox, i.label))
            .collect();
        answer.push_str(". ");
        answer.push_str(&records.join(", "));
    }
    format!("{THINK_OPEN}{}{THINK_CLOSE}{ANSWER_OPEN}{answer}{ANSWER_CLOSE}", doc.think)
}

/// Lists every format and consistency violation in `raw`.
pub fn validate_format(raw: &str) -> FormatReport {
    FormatReport { violations: analyze(raw).violations }
}
