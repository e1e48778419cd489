//! Hint-guided reasoning text generation against a chat-completions endpoint.

mod client;
mod overlay;
mod pipeline;
mod prompt;

pub use client::{
    api_key, data_url, generate, request_body, Completion, CompletionBackend, HttpMllmClient, MllmClientConfig, RetryPolicy,
    Sampling, Usage, DEFAULT_API_KEY_ENV,
};
pub(crate) use client::{http_client, post_json_with_retry};
pub use overlay::{decode_rgb, draw_hints, encode_png, plot_visual_hints, stroke_contains, stroke_width, HINT_COLOR};
pub use pipeline::{
    failures_path, mentions_hint, run_generation, GenerationFailure, GenerationOptions, GenerationReport,
};
pub use prompt::{
    build_generation_prompt, build_inference_prompt, build_opposite_hint_prompt, domain_knowledge_paragraph,
    format_text_hint, generation_user_prompt, inference_user_prompt, opposite_hint_user_prompt, PromptBundle, PromptMode, SYSTEM_PROMPT,
};

use std::fs;
use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::DatasetError;

#[derive(Debug, Error)]
pub enum TextGenError {
    #[error("sample {0:?} has no reference image")]
    MissingReference(String),
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("endpoint returned no completion text")]
    EmptyCompletion,
    #[error("text rejected: {0}")]
    Rejected(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Resolves manifest image paths to bytes.
pub trait ImageSource: Send + Sync {
    fn load(&self, path: &str) -> Result<Vec<u8>, TextGenError>;
}

/// Reads images from disk; relative paths are taken from `root`.
#[derive(Debug, Clone)]
pub struct FsImageSource {
    pub root: PathBuf,
}

impl FsImageSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl ImageSource for FsImageSource {
    fn load(&self, path: &str) -> Result<Vec<u8>, TextGenError> {
        let full = self.root.join(path);
        fs::read(&full).map_err(|source| TextGenError::Io { path: full, source })
    }
}
