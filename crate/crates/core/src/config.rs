//! Flat `section.key = value` configuration with compiled-in defaults.
//!
//! ```text
//! # comment
//! retrieval.S = 5
//! grpo.epsilon = 0.2
//! generation.base_url = "http://localhost:8000/v1"
//! ```
//!
//! Later assignments win; command-line overrides are applied after the file.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::eval::{EvalConfig, LocalizationRule};
use crate::grpo::{GrpoConfig, KlEstimator};
use crate::retrieval::{KlDirection, RetrievalParams};
use crate::reward::RewardConfig;
use crate::textgen::MllmClientConfig;
use crate::verify::VerificationConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: field {field:?}: {message}")]
    Parse { origin: String, field: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingConfig {
    pub base_url: Option<String>,
    pub model: String,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { base_url: None, model: "text-embedding".to_string() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalConfig {
    pub paths: PathsConfig,
    pub retrieval: RetrievalParams,
    pub generation: MllmClientConfig,
    pub inference: MllmClientConfig,
    pub checkpoint_every: usize,
    pub red_box_filter: bool,
    pub embedding: EmbeddingConfig,
    pub verify: VerificationConfig,
    pub reward: RewardConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        let url = "http://localhost:8000/v1";
        let model = "Qwen2.5-VL-72B-Instruct";
        Self {
            paths: PathsConfig::default(),
            retrieval: RetrievalParams::default(),
            generation: MllmClientConfig::generation(url, model),
            inference: MllmClientConfig::inference(url, model),
            checkpoint_every: 100,
            red_box_filter: false,
            embedding: EmbeddingConfig::default(),
            verify: VerificationConfig::default(),
            reward: RewardConfig::default(),
            grpo: GrpoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse {v:?}: {e}"))
}

fn parse_opt<T: FromStr>(v: &str) -> Result<Option<T>, String>
where
    T::Err: Display,
{
    if matches!(v, "" | "none" | "off") {
        Ok(None)
    } else {
        parse(v).map(Some)
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse_enum<T: Copy>(v: &str, options: &[(&str, T)]) -> Result<T, String> {
    options.iter().find(|(name, _)| *name == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
        format!("expected one of {}, got {v:?}", names.join(", "))
    })
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2 && ((v.starts_with('"') && v.ends_with('"')) || (v.starts_with('\'') && v.ends_with('\''))) {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

fn set_client(c: &mut MllmClientConfig, key: &str, v: &str) -> Result<bool, String> {
    match key {
        "base_url" => c.base_url = v.to_string(),
        "model" => c.model = v.to_string(),
        "api_key_env" => c.api_key_env = v.to_string(),
        "temperature" => c.sampling.temperature = parse(v)?,
        "top_p" => c.sampling.top_p = parse_opt(v)?,
        "top_k" => c.sampling.top_k = parse_opt(v)?,
        "min_p" => c.sampling.min_p = parse_opt(v)?,
        "max_output_tokens" => c.max_output_tokens = parse(v)?,
        "timeout_secs" => c.request_timeout = Duration::from_secs_f64(parse(v)?),
        "max_retries" => c.retry.max_retries = parse(v)?,
        "max_parallel" | "max_parallel_requests" => c.max_parallel_requests = parse(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl GlobalConfig {
    /// Applies one `section.key = value` assignment.
    pub fn set(&mut self, field: &str, value: &str) -> Result<(), String> {
        let v = unquote(value);
        let (section, key) = field.split_once('.').ok_or("expected section.key")?;
        match (section, key) {
            ("paths", "manifest") => self.paths.manifest = Some(v.into()),
            ("paths", "features") => self.paths.features = Some(v.into()),
            ("paths", "index") => self.paths.index = Some(v.into()),

            ("retrieval", "S" | "grid") => self.retrieval.grid = parse(v)?,
            ("retrieval", "N_c" | "n_centers") => self.retrieval.n_centers = parse(v)?,
            ("retrieval", "tau" | "trim") => self.retrieval.trim = parse(v)?,
            ("retrieval", "K" | "top_k") => self.retrieval.top_k = parse(v)?,
            ("retrieval", "seed") => self.retrieval.seed = parse(v)?,
            ("retrieval", "kl_direction") => {
                self.retrieval.direction = parse_enum(
                    v,
                    &[
                        ("reference_to_query", KlDirection::ReferenceToQuery),
                        ("query_to_reference", KlDirection::QueryToReference),
                    ],
                )?
            }

            ("generation", "checkpoint_every") => self.checkpoint_every = parse(v)?,
            ("generation", "red_box_filter") => self.red_box_filter = parse_bool(v)?,
            ("generation", k) => {
                if !set_client(&mut self.generation, k, v)? {
                    return Err("unknown key".into());
                }
            }
            ("inference", k) => {
                if !set_client(&mut self.inference, k, v)? {
                    return Err("unknown key".into());
                }
            }

            ("embedding", "base_url") => self.embedding.base_url = Some(v.to_string()),
            ("embedding", "model") => self.embedding.model = v.to_string(),

            ("verify", "iou_threshold") => self.verify.iou_threshold = parse(v)?,
            ("verify", "similarity_threshold") => self.verify.similarity_threshold = parse(v)?,
            ("verify", "strict_parse") => self.verify.strict_parse = parse_bool(v)?,

            ("reward", "match_iou") => self.reward.match_iou = parse(v)?,
            ("reward", "penalty_per_miss") => self.reward.penalty_per_miss = parse(v)?,
            ("reward", "format_failure_reward") => self.reward.format_failure_reward = parse(v)?,
            ("reward", "penalize_no_verdict") => self.reward.penalize_no_verdict = parse_bool(v)?,

            ("grpo", "G" | "group_size") => self.grpo.group_size = parse(v)?,
            ("grpo", "epsilon" | "clip_eps") => self.grpo.clip_eps = parse(v)?,
            ("grpo", "beta" | "kl_coeff") => self.grpo.kl_coeff = parse(v)?,
            ("grpo", "std_floor") => self.grpo.std_floor = parse(v)?,
            ("grpo", "batch_size") => self.grpo.batch_size = parse(v)?,
            ("grpo", "kl_estimator") => {
                self.grpo.kl_estimator =
                    parse_enum(v, &[("exponential", KlEstimator::Exponential), ("naive", KlEstimator::Naive)])?
            }

            ("eval", "localization_iou") => self.eval.localization_iou = parse(v)?,
            ("eval", "nms_iou") => self.eval.nms_iou = parse(v)?,
            ("eval", "strict_parse") => self.eval.strict_parse = parse_bool(v)?,
            ("eval", "rule") => {
                self.eval.rule = parse_enum(
                    v,
                    &[("all_regions", LocalizationRule::AllRegions), ("any_region", LocalizationRule::AnyRegion)],
                )?
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = format!("{origin}:{}", i + 1);
            let Some((field, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    origin: at,
                    field: line.to_string(),
                    message: "expected key = value".into(),
                });
            };
            let field = field.trim();
            self.set(field, value)
                .map_err(|message| ConfigError::Parse { origin: at, field: field.to_string(), message })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn Display| ConfigError::Invalid(e.to_string());
        self.retrieval.validate().map_err(|e| invalid(&e))?;
        self.verify.validate().map_err(|e| invalid(&e))?;
        self.reward.validate().map_err(|e| invalid(&e))?;
        self.grpo.validate().map_err(|e| invalid(&e))?;
        self.eval.validate().map_err(|e| invalid(&e))?;
        if self.checkpoint_every == 0 {
            return Err(ConfigError::Invalid("generation.checkpoint_every must be >= 1".into()));
        }
        if self.generation.max_parallel_requests == 0 {
            return Err(ConfigError::Invalid("generation.max_parallel must be >= 1".into()));
        }
        Ok(())
    }

    /// Effective settings as `key = value` lines.
    pub fn render(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let dir = match self.retrieval.direction {
            KlDirection::ReferenceToQuery => "reference_to_query",
            KlDirection::QueryToReference => "query_to_reference",
        };
        let est = match self.grpo.kl_estimator {
            KlEstimator::Exponential => "exponential",
            KlEstimator::Naive => "naive",
        };
        let rule = match self.eval.rule {
            LocalizationRule::AllRegions => "all_regions",
            LocalizationRule::AnyRegion => "any_region",
        };
        let mut lines = Vec::new();
        for (key, p) in [("manifest", &self.paths.manifest), ("features", &self.paths.features), ("index", &self.paths.index)] {
            if let Some(p) = p {
                lines.push(format!("paths.{key} = {}", p.display()));
            }
        }
        lines.extend([
            format!("retrieval.S = {}", self.retrieval.grid),
            format!("retrieval.N_c = {}", self.retrieval.n_centers),
            format!("retrieval.tau = {}", self.retrieval.trim),
            format!("retrieval.K = {}", self.retrieval.top_k),
            format!("retrieval.seed = {}", self.retrieval.seed),
            format!("retrieval.kl_direction = {dir}"),
        ]);
        for (name, c) in [("generation", &self.generation), ("inference", &self.inference)] {
            lines.extend([
                format!("{name}.base_url = {}", c.base_url),
                format!("{name}.model = {}", c.model),
                format!("{name}.api_key_env = {}", c.api_key_env),
                format!("{name}.temperature = {}", c.sampling.temperature),
                format!("{name}.top_p = {}", opt(c.sampling.top_p)),
                format!("{name}.top_k = {}", c.sampling.top_k.map_or("none".to_string(), |k| k.to_string())),
                format!("{name}.min_p = {}", opt(c.sampling.min_p)),
                format!("{name}.max_output_tokens = {}", c.max_output_tokens),
                format!("{name}.timeout_secs = {}", c.request_timeout.as_secs_f64()),
                format!("{name}.max_retries = {}", c.retry.max_retries),
                format!("{name}.max_parallel = {}", c.max_parallel_requests),
            ]);
        }
        lines.extend([
            format!("generation.checkpoint_every = {}", self.checkpoint_every),
            format!("generation.red_box_filter = {}", self.red_box_filter),
            format!("embedding.model = {}", self.embedding.model),
            format!("verify.iou_threshold = {}", self.verify.iou_threshold),
            format!("verify.similarity_threshold = {}", self.verify.similarity_threshold),
            format!("verify.strict_parse = {}", self.verify.strict_parse),
            format!("reward.match_iou = {}", self.reward.match_iou),
            format!("reward.penalty_per_miss = {}", self.reward.penalty_per_miss),
            format!("reward.format_failure_reward = {}", self.reward.format_failure_reward),
            format!("reward.penalize_no_verdict = {}", self.reward.penalize_no_verdict),
            format!("grpo.G = {}", self.grpo.group_size),
            format!("grpo.epsilon = {}", self.grpo.clip_eps),
            format!("grpo.beta = {}", self.grpo.kl_coeff),
            format!("grpo.std_floor = {}", self.grpo.std_floor),
            format!("grpo.kl_estimator = {est}"),
            format!("grpo.batch_size = {}", self.grpo.batch_size),
            format!("eval.localization_iou = {}", self.eval.localization_iou),
            format!("eval.rule = {rule}"),
            format!("eval.nms_iou = {}", self.eval.nms_iou),
            format!("eval.strict_parse = {}", self.eval.strict_parse),
        ]);
        if let Some(url) = &self.embedding.base_url {
            lines.push(format!("embedding.base_url = {url}"));
        }
        lines.join("\n") + "\n"
    }
}

/// Defaults, then the file (if any), then `overrides` in order.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<GlobalConfig, ConfigError> {
    let mut cfg = GlobalConfig::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?;
        cfg.apply_text(&text, &p.display().to_string())?;
    }
    for (field, value) in overrides {
        cfg.set(field, value).map_err(|message| ConfigError::Parse {
            origin: "command line".into(),
            field: field.clone(),
            message,
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}
