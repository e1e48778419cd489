//! Sample records, line-delimited manifest persistence, corpus statistics
//! and hold-out splitting.
//!
//! A manifest file is UTF-8 with one JSON record per line. Line 1 is the
//! header `{"schema_version":1}`; each following line is a [`Sample`].
//! Unknown sample fields are carried through load/save untouched.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Add;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::response::AnomalyInstance;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("unknown subdataset {0:?}")]
    UnknownSubdataset(String),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
}

impl DatasetError {
    fn schema(line: usize, message: impl Into<String>) -> Self {
        DatasetError::Schema { line, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleLabel {
    Normal,
    Abnormal,
}

impl SampleLabel {
    pub fn is_abnormal(self) -> bool {
        self == SampleLabel::Abnormal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub subdataset: String,
    pub category: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_image_path: Option<String>,
    pub label: SampleLabel,
    #[serde(default)]
    pub regions: Vec<AnomalyInstance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_text: Option<String>,
    #[serde(default)]
    pub verified: bool,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Sample {
    pub fn new(
        sample_id: impl Into<String>,
        subdataset: impl Into<String>,
        category: impl Into<String>,
        image_path: impl Into<String>,
        label: SampleLabel,
        regions: Vec<AnomalyInstance>,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            subdataset: subdataset.into(),
            category: category.into(),
            image_path: image_path.into(),
            reference_image_path: None,
            label,
            regions,
            generated_text: None,
            verified: false,
            extra: Map::new(),
        }
    }

    pub fn is_abnormal(&self) -> bool {
        self.label.is_abnormal()
    }

    /// Checks the label/regions invariant.
    pub fn validate(&self) -> Result<(), String> {
        if self.sample_id.is_empty() {
            return Err("empty sample_id".into());
        }
        match (self.label, self.regions.is_empty()) {
            (SampleLabel::Normal, false) => {
                Err(format!("{}: normal sample carries regions", self.sample_id))
            }
            (SampleLabel::Abnormal, true) => {
                Err(format!("{}: abnormal sample has no regions", self.sample_id))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
}

impl Manifest {
    /// Validates every sample and id uniqueness. Error lines are 1-based
    /// sample positions offset by the header line.
    pub fn new(samples: Vec<Sample>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for (i, s) in samples.iter().enumerate() {
            s.validate().map_err(|m| DatasetError::schema(i + 2, m))?;
            if !seen.insert(s.sample_id.as_str()) {
                return Err(DatasetError::schema(
                    i + 2,
                    format!("duplicate sample_id {:?}", s.sample_id),
                ));
            }
        }
        Ok(Self { samples })
    }

    pub fn empty() -> Self {
        Self { samples: Vec::new() }
    }

    pub fn schema_version(&self) -> u32 {
        SCHEMA_VERSION
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// Applies `f` to every sample and re-validates.
    pub fn map_samples<F>(self, f: F) -> Result<Self, DatasetError>
    where
        F: FnMut(Sample) -> Sample,
    {
        Manifest::new(self.samples.into_iter().map(f).collect())
    }

    pub fn subdatasets(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.subdataset.as_str()).collect()
    }

    pub fn categories(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.category.as_str()).collect()
    }
}

/// Directory that relative sample paths resolve against.
pub fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let io_err = |source| DatasetError::Io { path: path.to_path_buf(), source };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let header = loop {
        match lines.next() {
            None => return Err(DatasetError::schema(1, "missing schema_version header")),
            Some((_, line)) => {
                let line = line.map_err(io_err)?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let header: Header = serde_json::from_str(&header)
        .map_err(|e| DatasetError::schema(1, format!("bad header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(DatasetError::schema(
            1,
            format!("unsupported schema_version {}", header.schema_version),
        ));
    }

    let mut samples = Vec::new();
    let mut line_of = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample =
            serde_json::from_str(&line).map_err(|e| DatasetError::schema(idx + 1, e.to_string()))?;
        samples.push(sample);
        line_of.push(idx + 1);
    }
    Manifest::new(samples).map_err(|e| match e {
        // Re-map sample positions to physical line numbers.
        DatasetError::Schema { line, message } => DatasetError::Schema {
            line: line_of.get(line - 2).copied().unwrap_or(line),
            message,
        },
        other => other,
    })
}

/// Writes `content` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, content: &[u8]) -> std::io::Result<()> {
    let dir = manifest_dir(path);
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(content)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn render_manifest(m: &Manifest) -> String {
    let mut out = serde_json::to_string(&Header { schema_version: SCHEMA_VERSION })
        .expect("header serializes");
    out.push('\n');
    for s in &m.samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn save_manifest(m: &Manifest, path: &Path) -> Result<(), DatasetError> {
    write_atomic(path, render_manifest(m).as_bytes())
        .map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

/// Pluggable text → token count function.
pub trait TokenCounter: Sync {
    fn name(&self) -> &str;
    fn count(&self, text: &str) -> u64;
}

/// Counts whitespace-separated tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokens;

impl TokenCounter for WhitespaceTokens {
    fn name(&self) -> &str {
        "whitespace"
    }

    fn count(&self, text: &str) -> u64 {
        text.split_whitespace().count() as u64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubdatasetStats {
    pub sampled_images: u64,
    pub normal_images: u64,
    pub abnormal_images: u64,
    pub text_tokens: u64,
    pub object_categories: u64,
    pub anomaly_types: u64,
    pub num_anomalies: u64,
}

impl Add for SubdatasetStats {
    type Output = SubdatasetStats;

    fn add(self, o: SubdatasetStats) -> SubdatasetStats {
        SubdatasetStats {
            sampled_images: self.sampled_images + o.sampled_images,
            normal_images: self.normal_images + o.normal_images,
            abnormal_images: self.abnormal_images + o.abnormal_images,
            text_tokens: self.text_tokens + o.text_tokens,
            object_categories: self.object_categories + o.object_categories,
            anomaly_types: self.anomaly_types + o.anomaly_types,
            num_anomalies: self.num_anomalies + o.num_anomalies,
        }
    }
}

/// Per-subdataset corpus counts. Categories and anomaly types are distinct
/// within a subdataset; totals are sums over subdatasets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub token_counter: String,
    pub subdatasets: BTreeMap<String, SubdatasetStats>,
}

impl CorpusStats {
    pub fn total(&self) -> SubdatasetStats {
        self.subdatasets.values().cloned().fold(SubdatasetStats::default(), Add::add)
    }
}

impl Add for CorpusStats {
    type Output = CorpusStats;

    fn add(mut self, o: CorpusStats) -> CorpusStats {
        for (name, stats) in o.subdatasets {
            let slot = self.subdatasets.entry(name).or_default();
            *slot = std::mem::take(slot) + stats;
        }
        if self.token_counter.is_empty() {
            self.token_counter = o.token_counter;
        }
        self
    }
}

pub fn compute_statistics(m: &Manifest, counter: &dyn TokenCounter) -> CorpusStats {
    #[derive(Default)]
    struct Acc<'a> {
        stats: SubdatasetStats,
        categories: BTreeSet<&'a str>,
        labels: BTreeSet<&'a str>,
    }
    let mut acc: BTreeMap<&str, Acc> = BTreeMap::new();
    for s in &m.samples {
        let a = acc.entry(s.subdataset.as_str()).or_default();
        a.stats.sampled_images += 1;
        if s.is_abnormal() {
            a.stats.abnormal_images += 1;
        } else {
            a.stats.normal_images += 1;
        }
        a.stats.num_anomalies += s.regions.len() as u64;
        a.stats.text_tokens += s.generated_text.as_deref().map_or(0, |t| counter.count(t));
        a.categories.insert(&s.category);
        a.labels.extend(s.regions.iter().map(|r| r.label()));
    }
    CorpusStats {
        token_counter: counter.name().to_string(),
        subdatasets: acc
            .into_iter()
            .map(|(name, a)| {
                let mut stats = a.stats;
                stats.object_categories = a.categories.len() as u64;
                stats.anomaly_types = a.labels.len() as u64;
                (name.to_string(), stats)
            })
            .collect(),
    }
}

/// Partitions by subdataset: samples whose subdataset is in `test_subdatasets`
/// go to the second manifest.
pub fn split_holdout(
    m: &Manifest,
    test_subdatasets: &BTreeSet<String>,
) -> Result<(Manifest, Manifest), DatasetError> {
    let present = m.subdatasets();
    if let Some(missing) = test_subdatasets.iter().find(|n| !present.contains(n.as_str())) {
        return Err(DatasetError::UnknownSubdataset(missing.clone()));
    }
    let (test, train): (Vec<Sample>, Vec<Sample>) = m
        .samples
        .iter()
        .cloned()
        .partition(|s| test_subdatasets.contains(&s.subdataset));
    Ok((Manifest { samples: train }, Manifest { samples: test }))
}

/// Distinct normalized anomaly labels seen for `category`, sorted.
pub fn collect_domain_labels(m: &Manifest, category: &str) -> Result<BTreeSet<String>, DatasetError> {
    let mut found = false;
    let mut labels = BTreeSet::new();
    for s in m.samples.iter().filter(|s| s.category == category) {
        found = true;
        labels.extend(s.regions.iter().map(|r| r.label().to_string()));
    }
    if !found {
        return Err(DatasetError::UnknownCategory(category.to_string()));
    }
    Ok(labels)
}
