use std::collections::HashMap;
use std::path::{Path, PathBuf};

use adreason_core::config::{load_config, GlobalConfig};
use adreason_core::dataset::{compute_statistics, load_manifest, manifest_dir, save_manifest, write_atomic, WhitespaceTokens};
use adreason_core::eval::{evaluate_run, read_responses, write_report, LocalizationRule};
use adreason_core::grpo::{read_rollouts, summarize_rollouts};
use adreason_core::retrieval::{assign_references, build_index, load_feature_dir, load_index, save_index, FeatureGrid};
use adreason_core::reward::total_reward;
use adreason_core::textgen::{api_key, run_generation, FsImageSource, GenerationOptions, HttpMllmClient};
use adreason_core::verify::{verify_manifest, RemoteEmbedding, SimilarityProvider, TokenOverlap};
use serde::Serialize;
use serde_json::json;

use crate::error::CliError;
use crate::{Cli, CliResult, Command};

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::invalid(format!("--set expects KEY=VALUE, got {s:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut flag = |k: &str, v: String| out.push((k.to_string(), v));
    match &cli.command {
        Command::BuildIndex { seed: Some(s), .. } => flag("retrieval.seed", s.to_string()),
        Command::GenTexts { endpoint, model, parallel, red_box_filter, .. } => {
            if let Some(e) = endpoint {
                flag("generation.base_url", e.clone());
            }
            if let Some(m) = model {
                flag("generation.model", m.clone());
            }
            if let Some(p) = parallel {
                flag("generation.max_parallel", p.to_string());
            }
            if *red_box_filter {
                flag("generation.red_box_filter", "true".into());
            }
        }
        Command::Verify { embedding_endpoint: Some(e), .. } => flag("embedding.base_url", e.clone()),
        Command::Evaluate { loc_iou, any_region, .. } => {
            if let Some(t) = loc_iou {
                flag("eval.localization_iou", t.to_string());
            }
            if *any_region {
                flag("eval.rule", "any_region".into());
            }
        }
        _ => {}
    }
    Ok(out)
}

fn write_output(path: &Path, body: &[u8]) -> CliResult {
    write_atomic(path, body).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("record serializes") + "\n").collect()
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

pub fn run(cli: Cli) -> CliResult {
    let cfg = load_config(cli.config.as_deref(), &overrides(&cli)?)?;
    log::info!("effective configuration:\n{}", cfg.render().trim_end());
    match cli.command {
        Command::BuildIndex { features, manifest, out, .. } => build_index_cmd(&cfg, &features, manifest.as_deref(), &out),
        Command::AssignRefs { manifest, features, index, out } => assign_refs_cmd(&cfg, &manifest, &features, &index, &out),
        Command::GenTexts { manifest, out, images_root, .. } => gen_texts_cmd(&cfg, &manifest, &out, images_root),
        Command::Verify { manifest, out_accepted, out_rejected, report, .. } => {
            verify_cmd(&cfg, &manifest, &out_accepted, &out_rejected, report.as_deref())
        }
        Command::Reward { manifest, responses, out } => reward_cmd(&cfg, &manifest, &responses, &out),
        Command::GrpoCheck { rollouts, out } => grpo_check_cmd(&cfg, &rollouts, out.as_deref()),
        Command::Evaluate { manifest, responses, report, records, .. } => {
            evaluate_cmd(&cfg, &manifest, &responses, &report, records.as_deref())
        }
        Command::Stats { manifest, out } => stats_cmd(&manifest, &out),
    }
}

fn sorted_grids(features: HashMap<String, FeatureGrid>) -> Vec<FeatureGrid> {
    let mut grids: Vec<_> = features.into_values().collect();
    grids.sort_by(|a, b| a.image_id().cmp(b.image_id()));
    grids
}

fn build_index_cmd(cfg: &GlobalConfig, features: &Path, manifest: Option<&Path>, out: &Path) -> CliResult {
    let mut all = load_feature_dir(features)?;
    let pool = match manifest {
        None => sorted_grids(all),
        Some(p) => {
            let m = load_manifest(p)?;
            let mut pool = Vec::new();
            for s in m.samples().iter().filter(|s| !s.is_abnormal()) {
                let g = all
                    .remove(&s.sample_id)
                    .ok_or_else(|| CliError::invalid(format!("no feature file for normal sample {:?}", s.sample_id)))?;
                pool.push(g);
            }
            pool.sort_by(|a, b| a.image_id().cmp(b.image_id()));
            pool
        }
    };
    log::info!("building index over {} normal images", pool.len());
    let index = build_index(&pool, cfg.retrieval)?;
    save_index(&index, out)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn assign_refs_cmd(cfg: &GlobalConfig, manifest: &Path, features: &Path, index: &Path, out: &Path) -> CliResult {
    let m = load_manifest(manifest)?;
    let feats = load_feature_dir(features)?;
    let index = load_index(index, cfg.retrieval.direction)?;
    let assigned = assign_references(&m, &index, &feats)?;
    save_manifest(&assigned, out)?;
    log::info!("assigned references for {} samples", assigned.len());
    Ok(())
}

fn gen_texts_cmd(cfg: &GlobalConfig, manifest: &Path, out: &Path, images_root: Option<PathBuf>) -> CliResult {
    api_key(&cfg.generation.api_key_env)?;
    let m = load_manifest(manifest)?;
    let images = FsImageSource::new(images_root.unwrap_or_else(|| manifest_dir(manifest)));
    let backend = HttpMllmClient::new(cfg.generation.clone())?;
    let opts = GenerationOptions {
        max_parallel: cfg.generation.max_parallel_requests,
        checkpoint_every: cfg.checkpoint_every,
        red_box_filter: cfg.red_box_filter,
        cancel: None,
    };
    let report = run_generation(m, &backend, &images, out, &opts)?;
    log::info!(
        "generated {} texts, skipped {}, {} failures",
        report.generated,
        report.skipped,
        report.failures.len()
    );
    if !report.failures.is_empty() {
        log::warn!("failures recorded next to {}", out.display());
    }
    Ok(())
}

fn verify_cmd(
    cfg: &GlobalConfig,
    manifest: &Path,
    out_accepted: &Path,
    out_rejected: &Path,
    report_path: Option<&Path>,
) -> CliResult {
    let m = load_manifest(manifest)?;
    let provider: Box<dyn SimilarityProvider> = match &cfg.embedding.base_url {
        Some(url) => {
            let mut remote = RemoteEmbedding::new(url.clone(), cfg.embedding.model.clone())?;
            remote.api_key_env = cfg.generation.api_key_env.clone();
            Box::new(remote)
        }
        None => Box::new(TokenOverlap),
    };
    log::info!("label similarity provider: {}", provider.name());
    let (accepted, rejected, report) = verify_manifest(&m, &cfg.verify, provider.as_ref())?;
    save_manifest(&accepted, out_accepted)?;
    save_manifest(&rejected, out_rejected)?;
    if let Some(p) = report_path {
        write_output(p, pretty(&report).as_bytes())?;
    }
    log::info!("accepted {} of {} ({:?})", report.accepted, report.total, report.by_reason);
    Ok(())
}

fn reward_cmd(cfg: &GlobalConfig, manifest: &Path, responses: &Path, out: &Path) -> CliResult {
    cfg.reward.validate().map_err(CliError::invalid)?;
    let m = load_manifest(manifest)?;
    let responses = read_responses(responses)?;
    let mut lines = Vec::with_capacity(responses.len());
    for r in &responses {
        let s = m
            .get(&r.sample_id)
            .ok_or_else(|| CliError::invalid(format!("response for unknown sample {:?}", r.sample_id)))?;
        let b = total_reward(s, &r.raw_text, &cfg.reward);
        lines.push(json!({
            "sample_id": r.sample_id,
            "result_reward": b.result_reward,
            "consistency_penalty": b.consistency_penalty,
            "total": b.total,
            "unmatched_gt_count": b.unmatched_gt_count,
            "format_failure": b.format_failure,
        }));
    }
    write_output(out, jsonl(&lines).as_bytes())?;
    log::info!("scored {} responses", lines.len());
    Ok(())
}

fn grpo_check_cmd(cfg: &GlobalConfig, rollouts: &Path, out: Option<&Path>) -> CliResult {
    let groups = read_rollouts(rollouts)?;
    let summary = summarize_rollouts(&groups, &cfg.grpo)?;
    let body = pretty(&summary);
    match out {
        Some(p) => write_output(p, body.as_bytes())?,
        None => print!("{body}"),
    }
    log::info!(
        "{} groups, zero-advantage fraction {:.4}, mean objective {:?}",
        summary.groups,
        summary.zero_advantage_fraction,
        summary.mean_objective
    );
    Ok(())
}

fn evaluate_cmd(
    cfg: &GlobalConfig,
    manifest: &Path,
    responses: &Path,
    report_path: &Path,
    records_path: Option<&Path>,
) -> CliResult {
    let m = load_manifest(manifest)?;
    let responses = read_responses(responses)?;
    let (report, records) = evaluate_run(&responses, &m, &cfg.eval)?;
    write_report(&report, report_path)?;
    if let Some(p) = records_path {
        write_output(p, jsonl(&records).as_bytes())?;
    }
    let rule = match cfg.eval.rule {
        LocalizationRule::AllRegions => "all regions",
        LocalizationRule::AnyRegion => "any region",
    };
    log::info!(
        "detection acc {:.4} / localization acc {:.4} (IoU >= {}, {rule}) over {} classes",
        report.dataset.detection.accuracy,
        report.dataset.localization.accuracy,
        report.localization_iou,
        report.classes.len()
    );
    Ok(())
}

fn stats_cmd(manifest: &Path, out: &Path) -> CliResult {
    let m = load_manifest(manifest)?;
    let stats = compute_statistics(&m, &WhitespaceTokens);
    let body = json!({
        "token_counter": stats.token_counter,
        "subdatasets": stats.subdatasets,
        "total": stats.total(),
    });
    write_output(out, pretty(&body).as_bytes())
}
