use std::collections::VecDeque;

use adreason_core::geometry::{connected_components, iou, match_boxes, nms, BBox, BinaryMask, ScoredBox};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

const IOU_TOL: f64 = 1e-12;

fn random_box(rng: &mut ChaCha8Rng, extent: u32) -> BBox {
    let x0 = rng.random_range(0..extent - 1);
    let y0 = rng.random_range(0..extent - 1);
    let x1 = rng.random_range(x0 + 1..=extent);
    let y1 = rng.random_range(y0 + 1..=extent);
    BBox::new(x0, y0, x1, y1).unwrap()
}

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.to_array().map(f64::from);
    let [bx0, by0, bx1, by1] = b.to_array().map(f64::from);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    inter / union
}

fn iou_properties(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..10_000 {
        let (a, b) = (random_box(rng, 64), random_box(rng, 64));
        let v = iou(&a, &b);
        ensure!(v == iou(&b, &a), "iou not symmetric for {a} {b}");
        ensure!(iou(&a, &a) == 1.0, "iou({a}, {a}) != 1");
        ensure!((0.0..=1.0).contains(&v), "iou {v} out of range");
        ensure!((v - oracle_iou(&a, &b)).abs() <= IOU_TOL, "iou {v} vs oracle {}", oracle_iou(&a, &b));
    }
    Ok(())
}

fn oracle_nms(boxes: &[ScoredBox], thr: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score().partial_cmp(&boxes[a].score()).unwrap());
    let mut suppressed = vec![false; boxes.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(boxes[i]);
        for &j in &order[rank + 1..] {
            if oracle_iou(&boxes[i].bbox, &boxes[j].bbox) > thr {
                suppressed[j] = true;
            }
        }
    }
    kept
}

fn nms_oracle(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for set in 0..1000 {
        let n = rng.random_range(1..=30);
        let mut scores: Vec<u32> = (1..=1000).collect();
        scores.shuffle(rng);
        let boxes: Vec<ScoredBox> = (0..n)
            .map(|i| ScoredBox::new(random_box(rng, 48), f64::from(scores[i]) / 1000.0).unwrap())
            .collect();
        let thr = [0.1, 0.3, 0.5, 0.7][set % 4];
        ensure!(nms(&boxes, thr) == oracle_nms(&boxes, thr), "set {set}: nms differs from reference");
    }
    Ok(())
}

fn matching_one_to_one(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..1000 {
        let preds: Vec<BBox> = (0..rng.random_range(0..8)).map(|_| random_box(rng, 32)).collect();
        let gts: Vec<BBox> = (0..rng.random_range(0..8)).map(|_| random_box(rng, 32)).collect();
        let thr = rng.random_range(0.0..0.9);
        let m = match_boxes(&preds, &gts, thr);
        let mut pu = vec![false; preds.len()];
        let mut gu = vec![false; gts.len()];
        for &(p, g) in &m.pairs {
            ensure!(!pu[p] && !gu[g], "index reused in {:?}", m.pairs);
            ensure!(iou(&preds[p], &gts[g]) > thr, "pair below threshold");
            pu[p] = true;
            gu[g] = true;
        }
        let up: Vec<usize> = (0..preds.len()).filter(|&i| !pu[i]).collect();
        let ug: Vec<usize> = (0..gts.len()).filter(|&j| !gu[j]).collect();
        ensure!(m.unmatched_preds == up && m.unmatched_gts == ug, "unmatched lists inconsistent");
        for &p in &up {
            for &g in &ug {
                ensure!(iou(&preds[p], &gts[g]) <= thr, "greedy left an admissible pair unmatched");
            }
        }
    }
    Ok(())
}

fn oracle_components(mask: &[bool], w: usize, h: usize) -> Vec<[u32; 4]> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push([x0 as u32, y0 as u32, x1 as u32 + 1, y1 as u32 + 1]);
    }
    out.sort();
    out
}

fn components(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for m in 0..200 {
        let density = rng.random_range(0.05..0.6);
        let data: Vec<bool> = (0..64 * 64).map(|_| rng.random_bool(density)).collect();
        let mask = BinaryMask::new(64, 64, data.clone()).unwrap();
        let mut got: Vec<[u32; 4]> = connected_components(&mask).iter().map(BBox::to_array).collect();
        got.sort();
        ensure!(got == oracle_components(&data, 64, 64), "mask {m}: components differ from flood fill");
    }
    Ok(())
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    iou_properties(&mut rng)?;
    nms_oracle(&mut rng)?;
    matching_one_to_one(&mut rng)?;
    components(&mut rng)?;
    Ok(format!(
        "IoU properties on 10^4 pairs (oracle tol {IOU_TOL:e}); NMS = reference on 1000 sets; \
         matching one-to-one on 1000 cases; components = flood fill on 200 masks"
    ))
}
