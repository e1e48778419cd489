use adreason_core::grpo::{
    clipped_term, group_advantages, grpo_objective, GroupRollout, GrpoConfig, KlEstimator, Origin, RolloutResponse,
    TokenLogProbs,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

const ADV_TOL: f64 = 1e-9;
const OBJ_TOL: f64 = 1e-12;

fn oracle_advantages(r: &[f64], floor: f64) -> Vec<f64> {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < floor {
        return vec![0.0; r.len()];
    }
    r.iter().map(|x| (x - mean) / sd).collect()
}

/// Case analysis of the clipped surrogate.
fn oracle_clip(w: f64, a: f64, eps: f64) -> f64 {
    if a > 0.0 {
        if w > 1.0 + eps {
            (1.0 + eps) * a
        } else {
            w * a
        }
    } else if a < 0.0 {
        if w < 1.0 - eps {
            (1.0 - eps) * a
        } else {
            w * a
        }
    } else {
        0.0
    }
}

fn random_rewards(rng: &mut ChaCha8Rng, g: usize) -> Vec<f64> {
    match rng.random_range(0..4) {
        0 => vec![rng.random_range(-1.0..2.0); g],
        1 => (0..g).map(|_| f64::from(rng.random_range(0..6u8)) * 0.2).collect(),
        _ => (0..g).map(|_| rng.random_range(-1.0..2.0)).collect(),
    }
}

fn random_group(rng: &mut ChaCha8Rng, id: usize) -> GroupRollout {
    let rewards = random_rewards(rng, 8);
    let responses = rewards
        .into_iter()
        .map(|reward| {
            let len = rng.random_range(1..40);
            let policy: Vec<f64> = (0..len).map(|_| rng.random_range(-4.0..-0.01)).collect();
            let old = policy.iter().map(|p| p + rng.random_range(-0.4..0.4)).collect();
            let reference = policy.iter().map(|p| p + rng.random_range(-0.6..0.6)).collect();
            RolloutResponse {
                text: String::new(),
                reward,
                logprobs: TokenLogProbs::new(policy, old, reference).unwrap(),
                origin: Origin::Sampled,
            }
        })
        .collect();
    GroupRollout { query_id: format!("q{id}"), responses }
}

fn oracle_objective(g: &GroupRollout, cfg: &GrpoConfig) -> f64 {
    let rewards: Vec<f64> = g.responses.iter().map(|r| r.reward).collect();
    let adv = oracle_advantages(&rewards, cfg.std_floor);
    let mut sum = 0.0;
    let mut tokens = 0usize;
    for (r, a) in g.responses.iter().zip(adv) {
        let lp = &r.logprobs;
        for t in 0..lp.len() {
            let w = (lp.policy()[t] - lp.old()[t]).exp();
            let d = lp.reference()[t] - lp.policy()[t];
            let kl = match cfg.kl_estimator {
                KlEstimator::Exponential => d.exp() - d - 1.0,
                KlEstimator::Naive => -d,
            };
            sum += oracle_clip(w, a, cfg.clip_eps) - cfg.kl_coeff * kl;
            tokens += 1;
        }
    }
    sum / tokens as f64
}

pub fn run() -> Outcome {
    let cfg = GrpoConfig::default();
    ensure!(
        cfg.group_size == 8 && cfg.clip_eps == 0.2 && cfg.kl_coeff == 0.001,
        "defaults changed: {cfg:?}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let r = random_rewards(&mut rng, 8);
        let got = group_advantages(&r, cfg.std_floor).map_err(|e| e.to_string())?;
        for (a, b) in got.iter().zip(oracle_advantages(&r, cfg.std_floor)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst <= ADV_TOL, "advantage deviation {worst:e} > {ADV_TOL:e}");

    let mut worst_obj = 0.0f64;
    for i in 0..100 {
        let g = random_group(&mut rng, i);
        let c = GrpoConfig {
            kl_estimator: if i % 2 == 0 { KlEstimator::Exponential } else { KlEstimator::Naive },
            ..cfg
        };
        let got = grpo_objective(&g, &c).map_err(|e| e.to_string())?;
        worst_obj = worst_obj.max((got - oracle_objective(&g, &c)).abs());
    }
    ensure!(worst_obj <= OBJ_TOL, "objective deviation {worst_obj:e} > {OBJ_TOL:e}");

    let mut grid = 0;
    for eps in [0.0, 0.1, 0.2, 0.3, 0.5] {
        let mut ws: Vec<f64> = (0..=250).map(|i| f64::from(i) / 100.0).collect();
        ws.extend([1.0 - eps, 1.0 + eps]);
        for &w in &ws {
            for a in [-3.0, -1.0, -0.5, -1e-9, 0.0, 1e-9, 0.5, 1.0, 3.0] {
                let (got, want) = (clipped_term(w, a, eps), oracle_clip(w, a, eps));
                ensure!(got == want, "clipped_term({w}, {a}, {eps}) = {got}, case analysis gives {want}");
                grid += 1;
            }
        }
    }
    Ok(format!(
        "advantages max dev {worst:.1e} (tol {ADV_TOL:e}); objective max dev {worst_obj:.1e} (tol {OBJ_TOL:e}); \
         clipped_term exact on {grid} grid points"
    ))
}
