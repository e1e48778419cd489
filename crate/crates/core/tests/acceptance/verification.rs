use adreason_core::dataset::{Sample, SampleLabel};
use adreason_core::geometry::BBox;
use adreason_core::response::{render_response, AnomalyInstance, ResponseDoc, Verdict};
use adreason_core::verify::{verify_text, SimilarityProvider, TokenOverlap, VerificationConfig, VerifyError};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

struct Fixed(f64);

impl SimilarityProvider for Fixed {
    fn name(&self) -> &str {
        "fixed"
    }

    fn similarity(&self, _: &str, _: &str) -> Result<f64, VerifyError> {
        Ok(self.0)
    }
}

fn answer(preds: &[AnomalyInstance]) -> String {
    render_response(&ResponseDoc::new("inspected", Verdict::Yes, preds.to_vec()).unwrap())
}

fn boundary() -> Result<(), String> {
    let cfg = VerificationConfig::default();
    ensure!(cfg.iou_threshold == 0.9 && cfg.similarity_threshold == 0.6, "defaults changed: {cfg:?}");
    let gt = AnomalyInstance::new(BBox::new(0, 0, 100, 100).unwrap(), "crack").unwrap();
    let sample = Sample::new("b", "fixture", "plate", "b.png", SampleLabel::Abnormal, vec![gt]);
    // Height h over the 100x100 region gives IoU h / 100.
    for (h, iou_ok) in [(89, false), (90, false), (91, true)] {
        for (ss, ss_ok) in [(0.59, false), (0.6, false), (0.61, true)] {
            let pred = AnomalyInstance::new(BBox::new(0, 0, 100, h).unwrap(), "crack").unwrap();
            let r = verify_text(&sample, &answer(&[pred]), &cfg, &Fixed(ss)).map_err(|e| e.to_string())?;
            ensure!(
                r.accepted == (iou_ok && ss_ok),
                "IoU {} / similarity {ss}: accepted = {}",
                f64::from(h) / 100.0,
                r.accepted
            );
        }
    }
    Ok(())
}

const LABELS: &[&str] = &["crack", "small crack", "large crack", "scratch", "deep scratch", "hole"];

fn jitter(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let mut d = || rng.random_range(-8i64..=8);
    let x0 = (i64::from(b.x_min()) + d()).max(0);
    let y0 = (i64::from(b.y_min()) + d()).max(0);
    let x1 = (i64::from(b.x_max()) + d()).max(x0 + 1);
    let y1 = (i64::from(b.y_max()) + d()).max(y0 + 1);
    BBox::from_signed([x0, y0, x1, y1]).unwrap()
}

fn monotonicity() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut accepted_high = 0;
    for case in 0..500 {
        let n = rng.random_range(1..=3);
        let regions: Vec<AnomalyInstance> = (0..n)
            .map(|k| {
                let x0 = 70 * k + rng.random_range(0..10);
                let b = BBox::new(x0, 10, x0 + rng.random_range(20..60), rng.random_range(40..90)).unwrap();
                AnomalyInstance::new(b, LABELS.choose(&mut rng).unwrap()).unwrap()
            })
            .collect();
        let mut preds: Vec<AnomalyInstance> = regions
            .iter()
            .map(|r| {
                let label = if rng.random_bool(0.5) { r.label() } else { LABELS.choose(&mut rng).unwrap() };
                AnomalyInstance::new(jitter(&mut rng, r.bbox()), label).unwrap()
            })
            .collect();
        if rng.random_bool(0.1) {
            preds.pop();
        }
        if preds.is_empty() {
            continue;
        }
        let sample = Sample::new(format!("m{case}"), "fixture", "plate", "m.png", SampleLabel::Abnormal, regions);
        let high = VerificationConfig {
            iou_threshold: rng.random_range(0.2..0.95),
            similarity_threshold: rng.random_range(0.1..0.9),
            strict_parse: true,
        };
        let low = VerificationConfig {
            iou_threshold: high.iou_threshold * rng.random_range(0.0..=1.0),
            similarity_threshold: high.similarity_threshold * rng.random_range(0.0..=1.0),
            strict_parse: true,
        };
        let check = |preds: &[AnomalyInstance], cfg: &VerificationConfig| {
            verify_text(&sample, &answer(preds), cfg, &TokenOverlap).map(|r| r.accepted).map_err(|e| e.to_string())
        };
        let at_high = check(&preds, &high)?;
        let at_low = check(&preds, &low)?;
        ensure!(!at_high || at_low, "case {case}: accepted at {high:?} but rejected at {low:?}");
        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut rng);
        ensure!(check(&shuffled, &high)? == at_high, "case {case}: result depends on prediction order");
        accepted_high += usize::from(at_high);
    }
    Ok(accepted_high)
}

pub fn run() -> Outcome {
    boundary()?;
    let accepted = monotonicity()?;
    ensure!(accepted > 0, "monotonicity fixture never accepts; it checks nothing");
    Ok(format!(
        "only the (>0.9, >0.6) quadrant accepts (delta 0.01, exact thresholds rejected); \
         monotone and order-invariant on 500 cases ({accepted} accepted at the higher thresholds)"
    ))
}
