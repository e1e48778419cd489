use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::overlay::plot_visual_hints;
use super::{ImageSource, TextGenError};
use crate::dataset::Sample;
use crate::response::AnomalyInstance;

pub const SYSTEM_PROMPT: &str = "You are a professional industrial image inspector, particularly skilled at \
identifying abnormal (defective) areas in images.";

const TASK_LINE: &str = "- The first image is a normal sample, and you need to carefully inspect and analyze these \
two images to determine if there are any anomalies (defects) in the second image.";
const LOCATE_LINE: &str = "- If there are anomalies, return their locations in the form of coordinates";
const HINT_OPEN: &str = " (hint: the red box in the second image is our reminder, and the location and label of \
the abnormal area is: ";
const THINK_LINE: &str = "- You first need to think about the reasoning and analysis process in the mind and then \
provide us with the answer.";
const NO_MENTION_LINE: &str = "- The red box is our hint, you can't generate any content related to it.";
const NO_REVEAL_LINE: &str = "- You should output the coordinate location(s) of the abnormal area(s) in the \
reasoning process, but can't indicate that we provide location hint to you.";
const FORMAT_HEADER: &str = "Output Format (strictly follow)";
const FORMAT_LINE: &str = "The reasoning process and answer are enclosed within <think></think> and \
<answer></answer> tags, i.e., <think>reasoning and analysis process here</think><answer>Yes or No. If Yes, \
continue to output all locations, the format should be like {'bbox_2d': [x1, y1, x2, y2], 'label': \
'<anomaly type>'}</answer>.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Generation,
    Inference,
}

/// Everything sent for one request. Images are always (reference, input).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_prompt: String,
    pub user_prompt: String,
    pub reference_image: Vec<u8>,
    pub input_image: Vec<u8>,
    pub mode: PromptMode,
}

/// `([x_min, y_min, x_max, y_max], 'label')` per region, comma separated.
pub fn format_text_hint(regions: &[AnomalyInstance]) -> String {
    regions
        .iter()
        .map(|r| format!("({}, '{}')", r.bbox(), r.label()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn with_format(lines: &[&str]) -> String {
    format!("{}\n\n{FORMAT_HEADER}\n{FORMAT_LINE}", lines.join("\n"))
}

/// User prompt with the hint clauses filled in from `regions` (empty for
/// normal samples).
pub fn generation_user_prompt(regions: &[AnomalyInstance]) -> String {
    let locate = format!("{LOCATE_LINE}{HINT_OPEN}{}).", format_text_hint(regions));
    with_format(&[TASK_LINE, &locate, THINK_LINE, NO_MENTION_LINE, NO_REVEAL_LINE])
}

/// Generation prompt whose hint states the opposite of the ground truth,
/// used to draw deliberately wrong responses for a group.
pub fn opposite_hint_user_prompt(abnormal: bool) -> String {
    let hint = if abnormal { "this sample is normal" } else { "this sample is abnormal" };
    let locate = format!("{LOCATE_LINE}{HINT_OPEN}{hint}).");
    with_format(&[TASK_LINE, &locate, THINK_LINE, NO_MENTION_LINE, NO_REVEAL_LINE])
}

pub fn domain_knowledge_paragraph(category: &str, labels: &BTreeSet<String>) -> String {
    let joined = labels.iter().map(String::as_str).collect::<Vec<_>>().join(", ");
    format!(
        "Domain Knowledge: In the {category} sample, the following types of anomalies: {joined}, may occur. You \
should carefully inspect whether there are these anomalies, and apart from these anomaly types, other minor \
differences do not need to be considered as anomalies."
    )
}

/// Hint-free user prompt; a non-empty label set appends the domain
/// knowledge paragraph for `category`.
pub fn inference_user_prompt(category: &str, domain_labels: Option<&BTreeSet<String>>) -> String {
    let locate = format!("{LOCATE_LINE}.");
    let base = with_format(&[TASK_LINE, &locate, THINK_LINE]);
    match domain_labels {
        Some(labels) if !labels.is_empty() => format!("{base}\n\n{}", domain_knowledge_paragraph(category, labels)),
        _ => base,
    }
}

fn load_pair(sample: &Sample, images: &dyn ImageSource) -> Result<(Vec<u8>, Vec<u8>), TextGenError> {
    let reference = sample
        .reference_image_path
        .as_deref()
        .ok_or_else(|| TextGenError::MissingReference(sample.sample_id.clone()))?;
    Ok((images.load(reference)?, images.load(&sample.image_path)?))
}

/// Generation request: red boxes drawn on the input image plus text hints.
pub fn build_generation_prompt(sample: &Sample, images: &dyn ImageSource) -> Result<PromptBundle, TextGenError> {
    let (reference_image, input) = load_pair(sample, images)?;
    let boxes: Vec<_> = sample.regions.iter().map(|r| *r.bbox()).collect();
    let input_image = if boxes.is_empty() { input } else { plot_visual_hints(&input, &boxes)? };
    Ok(PromptBundle {
        system_prompt: SYSTEM_PROMPT.to_string(),
        user_prompt: generation_user_prompt(&sample.regions),
        reference_image,
        input_image,
        mode: PromptMode::Generation,
    })
}

/// Opposite-hint request; no boxes are drawn.
pub fn build_opposite_hint_prompt(sample: &Sample, images: &dyn ImageSource) -> Result<PromptBundle, TextGenError> {
    let (reference_image, input_image) = load_pair(sample, images)?;
    Ok(PromptBundle {
        system_prompt: SYSTEM_PROMPT.to_string(),
        user_prompt: opposite_hint_user_prompt(sample.is_abnormal()),
        reference_image,
        input_image,
        mode: PromptMode::Generation,
    })
}

pub fn build_inference_prompt(
    sample: &Sample,
    domain_labels: Option<&BTreeSet<String>>,
    images: &dyn ImageSource,
) -> Result<PromptBundle, TextGenError> {
    let (reference_image, input_image) = load_pair(sample, images)?;
    Ok(PromptBundle {
        system_prompt: SYSTEM_PROMPT.to_string(),
        user_prompt: inference_user_prompt(&sample.category, domain_labels),
        reference_image,
        input_image,
        mode: PromptMode::Inference,
    })
}
