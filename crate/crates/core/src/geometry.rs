//! Axis-aligned box arithmetic, one-to-one matching, suppression and
//! mask-to-box extraction.
//!
//! Boxes use pixel coordinates with an inclusive minimum and an exclusive
//! maximum, so `area = (x_max - x_min) * (y_max - y_min)`.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate box [{0}, {1}, {2}, {3}]: requires x_min < x_max and y_min < y_max")]
    DegenerateBox(i64, i64, i64, i64),
    #[error("box coordinate {0} is negative or out of range")]
    CoordinateOutOfRange(i64),
    #[error("score {0} is not in [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("grid data length {len} does not match {width}x{height}")]
    GridSize { width: usize, height: usize, len: usize },
}

/// Axis-aligned pixel box `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[u32; 4]")]
pub struct BBox {
    x_min: u32,
    y_min: u32,
    x_max: u32,
    y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, GeometryError> {
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::DegenerateBox(
                x_min.into(),
                y_min.into(),
                x_max.into(),
                y_max.into(),
            ));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    /// Builds a box from signed coordinates, rejecting negatives and overflow.
    pub fn from_signed(coords: [i64; 4]) -> Result<Self, GeometryError> {
        let mut out = [0u32; 4];
        for (slot, &c) in out.iter_mut().zip(coords.iter()) {
            *slot = u32::try_from(c).map_err(|_| GeometryError::CoordinateOutOfRange(c))?;
        }
        Self::new(out[0], out[1], out[2], out[3]).map_err(|_| {
            GeometryError::DegenerateBox(coords[0], coords[1], coords[2], coords[3])
        })
    }

    pub fn x_min(&self) -> u32 {
        self.x_min
    }
    pub fn y_min(&self) -> u32 {
        self.y_min
    }
    pub fn x_max(&self) -> u32 {
        self.x_max
    }
    pub fn y_max(&self) -> u32 {
        self.y_max
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn to_array(&self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        u64::from(w) * u64::from(h)
    }

    /// Clips the box to a `width x height` canvas. `None` when nothing remains.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<BBox> {
        BBox::new(
            self.x_min.min(width),
            self.y_min.min(height),
            self.x_max.min(width),
            self.y_max.min(height),
        )
        .ok()
    }
}

impl TryFrom<[i64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(value: [i64; 4]) -> Result<Self, Self::Error> {
        BBox::from_signed(value)
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// How an IoU value is compared against a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IouCriterion {
    /// `iou > threshold`
    Above(f64),
    /// `iou >= threshold`
    AtLeast(f64),
}

impl IouCriterion {
    pub fn accepts(&self, value: f64) -> bool {
        match *self {
            IouCriterion::Above(t) => value > t,
            IouCriterion::AtLeast(t) => value >= t,
        }
    }
}

/// Result of a one-to-one assignment between predictions and ground truths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Matching {
    /// `(pred index, gt index)` pairs in the order they were accepted.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl Matching {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Greedy one-to-one assignment over weighted candidate edges.
///
/// `weight(i, j)` returns `Some(w)` when pred `i` may pair with gt `j`. Edges
/// are taken by descending weight, ties by `(pred index, gt index)`.
pub fn greedy_match<F>(n_preds: usize, n_gts: usize, weight: F) -> Matching
where
    F: Fn(usize, usize) -> Option<f64>,
{
    let mut edges = Vec::new();
    for i in 0..n_preds {
        for j in 0..n_gts {
            if let Some(w) = weight(i, j) {
                edges.push((w, i, j));
            }
        }
    }
    edges.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut pred_used = vec![false; n_preds];
    let mut gt_used = vec![false; n_gts];
    let mut pairs = Vec::new();
    for (_, i, j) in edges {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            pairs.push((i, j));
        }
    }
    Matching {
        pairs,
        unmatched_preds: (0..n_preds).filter(|&i| !pred_used[i]).collect(),
        unmatched_gts: (0..n_gts).filter(|&j| !gt_used[j]).collect(),
    }
}

/// Greedy IoU matching where a pair qualifies under `criterion`.
pub fn match_boxes_with(preds: &[BBox], gts: &[BBox], criterion: IouCriterion) -> Matching {
    greedy_match(preds.len(), gts.len(), |i, j| {
        let v = iou(&preds[i], &gts[j]);
        criterion.accepts(v).then_some(v)
    })
}

/// Greedy IoU matching with strict `iou > iou_threshold`.
pub fn match_boxes(preds: &[BBox], gts: &[BBox], iou_threshold: f64) -> Matching {
    match_boxes_with(preds, gts, IouCriterion::Above(iou_threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::ScoreOutOfRange(score));
        }
        Ok(Self { bbox, score })
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited by descending score (equal scores keep input order); a
/// box survives when its IoU with every kept box is `<= iou_threshold`.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    let mut kept: Vec<ScoredBox> = Vec::new();
    for idx in order {
        let cand = &boxes[idx];
        if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) <= iou_threshold) {
            kept.push(*cand);
        }
    }
    kept
}

/// Row-major binary grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, GeometryError> {
        if data.len() != width * height {
            return Err(GeometryError::GridSize { width, height, len: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Row-major grid of real-valued anomaly scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, GeometryError> {
        if data.len() != width * height {
            return Err(GeometryError::GridSize { width, height, len: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Maximum score inside `bbox` (clipped to the grid); 0 when empty.
    pub fn max_in(&self, bbox: &BBox) -> f64 {
        let x1 = (bbox.x_max() as usize).min(self.width);
        let y1 = (bbox.y_max() as usize).min(self.height);
        let mut best = 0.0f64;
        for y in bbox.y_min() as usize..y1 {
            for x in bbox.x_min() as usize..x1 {
                best = best.max(self.get(x, y));
            }
        }
        best
    }
}

/// Foreground wherever `score >= threshold`.
pub fn binarize(scores: &ScoreMap, threshold: f64) -> BinaryMask {
    BinaryMask {
        width: scores.width,
        height: scores.height,
        data: scores.data.iter().map(|&s| s >= threshold).collect(),
    }
}

/// Tight boxes of the 8-connected foreground components, ordered by
/// `(y_min, x_min)`.
pub fn connected_components(mask: &BinaryMask) -> Vec<BBox> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut boxes = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..w * h {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % w, p / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        boxes.push(
            BBox::new(x0 as u32, y0 as u32, x1 as u32 + 1, y1 as u32 + 1)
                .expect("component box is non-empty"),
        );
    }
    boxes.sort_by_key(|b| (b.y_min(), b.x_min(), b.y_max(), b.x_max()));
    boxes
}
