use adreason_core::dataset::{Sample, SampleLabel};
use adreason_core::geometry::BBox;
use adreason_core::grpo::{
    contrastive_augment, is_zero_advantage, AugmentConfig, AugmentOutcome, GroupRollout, GrpoConfig, Origin,
    RolloutResponse, TokenLogProbs,
};
use adreason_core::response::AnomalyInstance;
use adreason_core::reward::RewardConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

const TRIALS: usize = 100_000;
const TOL: f64 = 0.02;

const POSITIVE: &str = "<think>a crack at the top left</think><answer>Yes, {'bbox_2d': [10, 10, 40, 40], \
'label': 'crack'}</answer>";
const NEGATIVE: &str = "<think>both images look the same</think><answer>No</answer>";

pub fn run() -> Outcome {
    let g = GrpoConfig::default().group_size;
    let floor = GrpoConfig::default().std_floor;
    let reward_cfg = RewardConfig::default();
    let aug = AugmentConfig::default();
    let mut sample = Sample::new(
        "z",
        "sim",
        "plate",
        "z.png",
        SampleLabel::Abnormal,
        vec![AnomalyInstance::new(BBox::new(10, 10, 40, 40).unwrap(), "crack").unwrap()],
    );
    sample.generated_text = Some(POSITIVE.to_string());

    let mut details = Vec::new();
    for (k, p) in [0.1f64, 0.5, 0.9].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let (mut zero, mut zero_after) = (0usize, 0usize);
        for t in 0..TRIALS {
            let responses: Vec<RolloutResponse> = (0..g)
                .map(|_| {
                    let pos = rng.random_bool(p);
                    RolloutResponse {
                        text: if pos { POSITIVE } else { NEGATIVE }.to_string(),
                        reward: if pos { 1.0 } else { 0.0 },
                        logprobs: TokenLogProbs::default(),
                        origin: Origin::Sampled,
                    }
                })
                .collect();
            let group = GroupRollout { query_id: format!("{t}"), responses };
            let was_zero = is_zero_advantage(&group.rewards(), floor);
            zero += usize::from(was_zero);
            let out = contrastive_augment(&group, &sample, &reward_cfg, &aug, |_| Ok(NEGATIVE.to_string()));
            if !was_zero {
                ensure!(
                    out.outcome == AugmentOutcome::PassThrough && out.group == group,
                    "mixed group was modified"
                );
            }
            zero_after += usize::from(is_zero_advantage(&out.group.rewards(), floor));
        }
        let measured = zero as f64 / TRIALS as f64;
        let expected = p.powi(8) + (1.0 - p).powi(8);
        ensure!(
            (measured - expected).abs() <= TOL,
            "p={p}: zero-advantage fraction {measured:.4} vs {expected:.4} (tol {TOL})"
        );
        ensure!(zero_after == 0, "p={p}: {zero_after} zero-advantage groups left after augmentation");
        details.push(format!("p={p}: {measured:.4} vs {expected:.4}"));
    }
    Ok(format!("{} (tol ±{TOL}); 0 after augmentation", details.join(", ")))
}
