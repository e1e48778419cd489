use adreason_core::dataset::{Sample, SampleLabel};
use adreason_core::geometry::BBox;
use adreason_core::response::{render_response, AnomalyInstance, ResponseDoc, Verdict};
use adreason_core::reward::{total_reward, RewardConfig};

use crate::{ensure, Outcome};

const TOL: f64 = 1e-12;

enum Answer {
    No,
    /// `(gt index, box height)`; a box of height `h` over a 100x100 region
    /// has IoU `h / 100`.
    Yes(&'static [(u32, u32)]),
    Raw(&'static str),
}

struct Case {
    abnormal: bool,
    regions: u32,
    answer: Answer,
    expected: f64,
}

fn region(i: u32) -> BBox {
    let (x, y) = [(0, 0), (200, 0), (0, 200)][i as usize];
    BBox::new(x, y, x + 100, y + 100).unwrap()
}

fn pred(i: u32, h: u32) -> BBox {
    let r = region(i);
    BBox::new(r.x_min(), r.y_min(), r.x_max(), r.y_min() + h).unwrap()
}

fn text(answer: &Answer) -> String {
    let doc = match answer {
        Answer::No => ResponseDoc::new("the two images match", Verdict::No, vec![]),
        Answer::Yes(preds) => ResponseDoc::new(
            "the second image differs near the marked area",
            Verdict::Yes,
            preds.iter().map(|&(i, h)| AnomalyInstance::new(pred(i, h), "crack").unwrap()).collect(),
        ),
        Answer::Raw(s) => return s.to_string(),
    };
    render_response(&doc.unwrap())
}

fn cases() -> Vec<Case> {
    use Answer::*;
    let c = |abnormal, regions, answer, expected| Case { abnormal, regions, answer, expected };
    vec![
        c(false, 0, No, 1.0),
        c(false, 0, Yes(&[(0, 95)]), 0.0),
        c(false, 0, Yes(&[(0, 95), (1, 95)]), 0.0),
        c(true, 1, No, 0.0),
        c(true, 2, No, 0.0),
        c(true, 3, No, 0.0),
        c(true, 1, Yes(&[(0, 95)]), 1.0),
        c(true, 1, Yes(&[(0, 51)]), 1.0),
        c(true, 1, Yes(&[(0, 50)]), 0.8),
        c(true, 1, Yes(&[(0, 40)]), 0.8),
        c(true, 1, Yes(&[(0, 95), (0, 51)]), 1.0),
        c(true, 2, Yes(&[(0, 95), (1, 95)]), 1.0),
        c(true, 2, Yes(&[(0, 95), (1, 40)]), 0.8),
        c(true, 2, Yes(&[(0, 40), (1, 40)]), 0.6),
        c(true, 2, Yes(&[(1, 51)]), 0.8),
        c(true, 3, Yes(&[(0, 95), (1, 95), (2, 95)]), 1.0),
        c(true, 3, Yes(&[(0, 95), (1, 51), (2, 40)]), 0.8),
        c(true, 3, Yes(&[(0, 40), (1, 40), (2, 40)]), 0.4),
        c(true, 3, Yes(&[(2, 95)]), 0.6),
        c(true, 1, Raw("the second image looks broken"), 0.0),
    ]
}

pub fn run() -> Outcome {
    let cfg = RewardConfig::default();
    ensure!(cfg.match_iou == 0.5 && cfg.penalty_per_miss == 0.2, "defaults changed: {cfg:?}");
    let cases = cases();
    for (n, case) in cases.iter().enumerate() {
        let label = if case.abnormal { SampleLabel::Abnormal } else { SampleLabel::Normal };
        let regions = (0..case.regions).map(|i| AnomalyInstance::new(region(i), "crack").unwrap()).collect();
        let sample = Sample::new(format!("r{n}"), "fixture", "plate", "x.png", label, regions);
        let got = total_reward(&sample, &text(&case.answer), &cfg);
        ensure!(
            (got.total - case.expected).abs() <= TOL,
            "case {}: total {} expected {}",
            n + 1,
            got.total,
            case.expected
        );
        if let Answer::Raw(_) = case.answer {
            ensure!(got.format_failure, "case {}: format failure not flagged", n + 1);
        }
    }
    Ok(format!("{} cases match hand-computed totals (tol {TOL:e})", cases.len()))
}
