use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;

use serde::{Deserialize, Serialize};

use super::{build_generation_prompt, CompletionBackend, ImageSource, TextGenError};
use crate::dataset::{save_manifest, write_atomic, Manifest, Sample};

#[derive(Debug, Clone)]
pub struct GenerationOptions {
    /// Upper bound on in-flight requests.
    pub max_parallel: usize,
    pub checkpoint_every: usize,
    /// Reject texts that mention the red hint box.
    pub red_box_filter: bool,
    /// Setting this stops workers from picking up new samples.
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self { max_parallel: 8, checkpoint_every: 100, red_box_filter: false, cancel: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub sample_id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct GenerationReport {
    pub manifest: Manifest,
    pub generated: usize,
    /// Samples that already had text and were left alone.
    pub skipped: usize,
    pub failures: Vec<GenerationFailure>,
    pub cancelled: bool,
}

/// `<out>.failures.jsonl`.
pub fn failures_path(out_path: &Path) -> PathBuf {
    let mut name = out_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".failures.jsonl");
    out_path.with_file_name(name)
}

pub fn mentions_hint(text: &str) -> bool {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ").contains("red box")
}

fn generate_one(
    sample: &Sample,
    backend: &dyn CompletionBackend,
    images: &dyn ImageSource,
    red_box_filter: bool,
) -> Result<String, TextGenError> {
    let bundle = build_generation_prompt(sample, images)?;
    let text = backend.complete(&bundle)?.text;
    if red_box_filter && mentions_hint(&text) {
        return Err(TextGenError::Rejected("text mentions the red hint box".into()));
    }
    Ok(text)
}

fn checkpoint(samples: &[Sample], failures: &[GenerationFailure], out_path: &Path) -> Result<(), TextGenError> {
    let m = Manifest::new(samples.to_vec())?;
    save_manifest(&m, out_path)?;
    let lines: String = failures
        .iter()
        .map(|f| serde_json::to_string(f).expect("failure serializes") + "\n")
        .collect();
    let path = failures_path(out_path);
    write_atomic(&path, lines.as_bytes()).map_err(|source| TextGenError::Io { path, source })
}

/// Fills `generated_text` for every sample lacking it. Progress is written to
/// `out_path` every `checkpoint_every` completions and at the end; failures go
/// to [`failures_path`]. Only an unwritable output is fatal.
pub fn run_generation(
    m: Manifest,
    backend: &dyn CompletionBackend,
    images: &dyn ImageSource,
    out_path: &Path,
    opts: &GenerationOptions,
) -> Result<GenerationReport, TextGenError> {
    let source = m.samples().to_vec();
    let mut samples = m.into_samples();
    let todo: Vec<usize> = (0..source.len()).filter(|&i| source[i].generated_text.is_none()).collect();
    let skipped = source.len() - todo.len();
    let every = opts.checkpoint_every.max(1);
    let workers = opts.max_parallel.max(1).min(todo.len().max(1));

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let cancelled = || opts.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst));
    let mut failures = Vec::new();
    let mut generated = 0;
    let mut fatal = None;

    thread::scope(|s| {
        let (tx, rx) = mpsc::channel();
        for _ in 0..workers {
            let tx = tx.clone();
            let (source, todo, next, stop) = (&source, &todo, &next, &stop);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) || cancelled() {
                    break;
                }
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = todo.get(k) else { break };
                let result = generate_one(&source[i], backend, images, opts.red_box_filter);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut done = 0;
        for (i, result) in rx {
            match result {
                Ok(text) => {
                    samples[i].generated_text = Some(text);
                    generated += 1;
                }
                Err(e) => {
                    log::warn!("generation failed for {}: {e}", samples[i].sample_id);
                    failures.push(GenerationFailure { sample_id: samples[i].sample_id.clone(), error: e.to_string() });
                }
            }
            done += 1;
            if done % every == 0 {
                if let Err(e) = checkpoint(&samples, &failures, out_path) {
                    stop.store(true, Ordering::SeqCst);
                    fatal = Some(e);
                    break;
                }
                log::info!("checkpoint: {done}/{} samples processed", todo.len());
            }
        }
    });

    if let Some(e) = fatal {
        return Err(e);
    }
    checkpoint(&samples, &failures, out_path)?;
    Ok(GenerationReport {
        manifest: Manifest::new(samples)?,
        generated,
        skipped,
        failures,
        cancelled: cancelled(),
    })
}
