//! Group-relative policy optimization arithmetic: advantages, importance
//! ratios, the clipped surrogate with a KL penalty, and contrastive group
//! composition. Gradients and optimizers live elsewhere; this module only
//! evaluates the objective for externally supplied log-probabilities.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_atomic, Sample};
use crate::reward::{total_reward, RewardConfig};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group needs at least 2 responses, got {0}")]
    GroupTooSmall(usize),
    #[error("group has no scored tokens")]
    EmptyResponses,
    #[error("invalid log-probabilities: {0}")]
    InvalidLogProbs(String),
    #[error("invalid reward: {0}")]
    InvalidReward(String),
    #[error("invalid GRPO config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Per-token KL estimator, with `d = log pi_ref - log pi_theta`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// `exp(d) - d - 1`, non-negative and unbiased.
    #[default]
    Exponential,
    /// `-d`.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub std_floor: f64,
    pub kl_estimator: KlEstimator,
    /// Prompts per rollout batch.
    pub batch_size: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_coeff: 0.001,
            std_floor: 1e-8,
            kl_estimator: KlEstimator::Exponential,
            batch_size: 32,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: String| Err(GrpoError::InvalidConfig(m));
        if self.group_size < 2 {
            return bad(format!("group_size = {} must be >= 2", self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps = {} is outside (0, 1)", self.clip_eps));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return bad(format!("kl_coeff = {} must be >= 0", self.kl_coeff));
        }
        if !(self.std_floor >= 0.0 && self.std_floor.is_finite()) {
            return bad(format!("std_floor = {} must be >= 0", self.std_floor));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// Aligned per-token log-probabilities of one response under the current,
/// behavior and reference policies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLogProbs")]
pub struct TokenLogProbs {
    policy: Vec<f64>,
    old: Vec<f64>,
    reference: Vec<f64>,
}

#[derive(Deserialize)]
struct RawLogProbs {
    policy: Vec<f64>,
    old: Vec<f64>,
    reference: Vec<f64>,
}

impl TryFrom<RawLogProbs> for TokenLogProbs {
    type Error = GrpoError;

    fn try_from(r: RawLogProbs) -> Result<Self, Self::Error> {
        TokenLogProbs::new(r.policy, r.old, r.reference)
    }
}

impl TokenLogProbs {
    pub fn new(policy: Vec<f64>, old: Vec<f64>, reference: Vec<f64>) -> Result<Self, GrpoError> {
        if policy.len() != old.len() || policy.len() != reference.len() {
            return Err(GrpoError::InvalidLogProbs(format!(
                "lengths differ: {} / {} / {}",
                policy.len(),
                old.len(),
                reference.len()
            )));
        }
        if policy.iter().chain(&old).chain(&reference).any(|v| !v.is_finite()) {
            return Err(GrpoError::InvalidLogProbs("non-finite value".into()));
        }
        Ok(Self { policy, old, reference })
    }

    /// Policy, behavior and reference all equal (on-policy, no drift).
    pub fn on_policy(logprobs: Vec<f64>) -> Result<Self, GrpoError> {
        Self::new(logprobs.clone(), logprobs.clone(), logprobs)
    }

    pub fn len(&self) -> usize {
        self.policy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policy.is_empty()
    }

    pub fn policy(&self) -> &[f64] {
        &self.policy
    }

    pub fn old(&self) -> &[f64] {
        &self.old
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Sampled,
    DatasetPositive,
    RegeneratedNegative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResponse {
    pub text: String,
    pub reward: f64,
    #[serde(default)]
    pub logprobs: TokenLogProbs,
    #[serde(default)]
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub query_id: String,
    pub responses: Vec<RolloutResponse>,
}

impl GroupRollout {
    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }

    pub fn validate(&self, group_size: usize) -> Result<(), GrpoError> {
        if self.responses.len() != group_size {
            return Err(GrpoError::InvalidConfig(format!(
                "group {:?} has {} responses, expected {group_size}",
                self.query_id,
                self.responses.len()
            )));
        }
        if let Some(r) = self.responses.iter().find(|r| !r.reward.is_finite()) {
            return Err(GrpoError::InvalidReward(format!("{} in group {:?}", r.reward, self.query_id)));
        }
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(r_i - mean) / std` with the population std; all zeros when the std is
/// below `std_floor`.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(GrpoError::InvalidReward(r.to_string()));
    }
    let (mean, std) = mean_std(rewards);
    if std < std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

pub fn is_zero_advantage(rewards: &[f64], std_floor: f64) -> bool {
    rewards.len() < 2 || mean_std(rewards).1 < std_floor
}

/// `exp(log pi_theta - log pi_old)` per token.
pub fn importance_ratios(lp: &TokenLogProbs) -> Vec<f64> {
    lp.policy.iter().zip(&lp.old).map(|(p, o)| (p - o).exp()).collect()
}

/// `min(w * a, clip(w, 1 - eps, 1 + eps) * a)`.
pub fn clipped_term(w: f64, advantage: f64, eps: f64) -> f64 {
    (w * advantage).min(w.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

pub fn kl_terms(lp: &TokenLogProbs, estimator: KlEstimator) -> Vec<f64> {
    lp.reference
        .iter()
        .zip(&lp.policy)
        .map(|(r, p)| {
            let d = r - p;
            match estimator {
                KlEstimator::Exponential => d.exp() - d - 1.0,
                KlEstimator::Naive => -d,
            }
        })
        .collect()
}

/// Per-token `exp(d) - d - 1` with `d = log pi_ref - log pi_theta`.
pub fn kl_penalty_term(lp: &TokenLogProbs) -> Vec<f64> {
    kl_terms(lp, KlEstimator::Exponential)
}

/// Token mean over the whole group of `clipped_term - beta * kl`.
pub fn grpo_objective(group: &GroupRollout, cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    let adv = group_advantages(&group.rewards(), cfg.std_floor)?;
    let tokens: usize = group.responses.iter().map(|r| r.logprobs.len()).sum();
    if tokens == 0 {
        return Err(GrpoError::EmptyResponses);
    }
    let mut sum = 0.0;
    for (r, a) in group.responses.iter().zip(adv) {
        let ratios = importance_ratios(&r.logprobs);
        let kl = kl_terms(&r.logprobs, cfg.kl_estimator);
        for (w, k) in ratios.into_iter().zip(kl) {
            sum += clipped_term(w, a, cfg.clip_eps) - cfg.kl_coeff * k;
        }
    }
    Ok(sum / tokens as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub query_id: String,
    /// `None` when the group has no scored tokens.
    pub objective: Option<f64>,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub zero_advantage: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub groups: usize,
    pub mean_objective: Option<f64>,
    pub zero_advantage_fraction: f64,
    pub per_group: Vec<GroupSummary>,
}

pub fn summarize_rollouts(groups: &[GroupRollout], cfg: &GrpoConfig) -> Result<RolloutSummary, GrpoError> {
    cfg.validate()?;
    let mut per_group = Vec::with_capacity(groups.len());
    for g in groups {
        g.validate(cfg.group_size)?;
        let rewards = g.rewards();
        let (reward_mean, reward_std) = mean_std(&rewards);
        let objective = match grpo_objective(g, cfg) {
            Ok(v) => Some(v),
            Err(GrpoError::EmptyResponses) => None,
            Err(e) => return Err(e),
        };
        per_group.push(GroupSummary {
            query_id: g.query_id.clone(),
            objective,
            reward_mean,
            reward_std,
            zero_advantage: is_zero_advantage(&rewards, cfg.std_floor),
        });
    }
    let objectives: Vec<f64> = per_group.iter().filter_map(|g| g.objective).collect();
    let zero = per_group.iter().filter(|g| g.zero_advantage).count();
    Ok(RolloutSummary {
        groups: groups.len(),
        mean_objective: (!objectives.is_empty()).then(|| objectives.iter().sum::<f64>() / objectives.len() as f64),
        zero_advantage_fraction: if groups.is_empty() { 0.0 } else { zero as f64 / groups.len() as f64 },
        per_group,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum AugmentOutcome {
    PassThrough,
    InjectedPositive,
    Regenerated,
    RegenFailed(String),
    MissingDatasetText,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentResult {
    pub group: GroupRollout,
    pub outcome: AugmentOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Responses with reward at or above this count as positive.
    pub positive_threshold: f64,
    /// Responses replaced in an all-positive group.
    pub regen_count: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { positive_threshold: 1.0, regen_count: 2, seed: 0 }
    }
}

/// Makes sure a group holds both positive and negative responses.
///
/// All negative: the lowest-reward response (first on ties) becomes the
/// sample's dataset text. All positive: `regen_count` responses picked with a
/// seeded RNG are replaced by `regen` outputs, which are expected to come from
/// opposite-hint prompts. New responses are rescored with the reward engine
/// and carry no log-probabilities; the trainer must score them. Mixed groups
/// and failed regenerations come back unchanged.
pub fn contrastive_augment<F>(
    group: &GroupRollout,
    sample: &Sample,
    reward_cfg: &RewardConfig,
    cfg: &AugmentConfig,
    mut regen: F,
) -> AugmentResult
where
    F: FnMut(&Sample) -> Result<String, String>,
{
    let positive = |r: &RolloutResponse| r.reward >= cfg.positive_threshold;
    let n_pos = group.responses.iter().filter(|r| positive(r)).count();
    let unchanged = |outcome| AugmentResult { group: group.clone(), outcome };

    if group.responses.is_empty() || (n_pos > 0 && n_pos < group.responses.len()) {
        return unchanged(AugmentOutcome::PassThrough);
    }
    let mut out = group.clone();
    if n_pos == 0 {
        let Some(text) = sample.generated_text.clone() else {
            return unchanged(AugmentOutcome::MissingDatasetText);
        };
        let worst = (0..out.responses.len())
            .min_by(|&a, &b| out.responses[a].reward.total_cmp(&out.responses[b].reward).then(a.cmp(&b)))
            .expect("non-empty group");
        let reward = total_reward(sample, &text, reward_cfg).total;
        out.responses[worst] =
            RolloutResponse { text, reward, logprobs: TokenLogProbs::default(), origin: Origin::DatasetPositive };
        return AugmentResult { group: out, outcome: AugmentOutcome::InjectedPositive };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.regen_count.min(out.responses.len());
    let mut picks = sample_indices(&mut rng, out.responses.len(), k).into_vec();
    picks.sort_unstable();
    let mut texts = Vec::with_capacity(k);
    for _ in 0..k {
        match regen(sample) {
            Ok(t) => texts.push(t),
            Err(e) => return unchanged(AugmentOutcome::RegenFailed(e)),
        }
    }
    for (i, text) in picks.into_iter().zip(texts) {
        let reward = total_reward(sample, &text, reward_cfg).total;
        out.responses[i] =
            RolloutResponse { text, reward, logprobs: TokenLogProbs::default(), origin: Origin::RegeneratedNegative };
    }
    AugmentResult { group: out, outcome: AugmentOutcome::Regenerated }
}

/// One group per line.
pub fn read_rollouts(path: &Path) -> Result<Vec<GroupRollout>, GrpoError> {
    let text = fs::read_to_string(path).map_err(|source| GrpoError::Io { path: path.to_path_buf(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| GrpoError::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn write_rollouts(groups: &[GroupRollout], path: &Path) -> Result<(), GrpoError> {
    let body: String = groups
        .iter()
        .map(|g| serde_json::to_string(g).expect("rollout serializes") + "\n")
        .collect();
    write_atomic(path, body.as_bytes()).map_err(|source| GrpoError::Io { path: path.to_path_buf(), source })
}
