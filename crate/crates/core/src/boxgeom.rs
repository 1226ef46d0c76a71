//! Axis-aligned boxes in continuous pixel coordinates.
//!
//! Area is `(x2 - x1) * (y2 - y1)`; a valid box has strictly positive width
//! and height and finite corners. Invalid boxes are rejected when built, so
//! every other function here is total.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper clamp on `dw`/`dh` before exponentiation.
pub const DELTA_CLAMP: f64 = 2.772_588_722_239_781; // ln(16)

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoxError {
    #[error("degenerate box ({x1}, {y1}, {x2}, {y2})")]
    Degenerate { x1: f64, y1: f64, x2: f64, y2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = BoxError;

    fn try_from(r: RawBox) -> Result<Self, BoxError> {
        BBox::new(r.x1, r.y1, r.x2, r.y2)
    }
}

impl From<BBox> for RawBox {
    fn from(b: BBox) -> Self {
        RawBox {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        }
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BoxError> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(BoxError::Degenerate { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Intersection with `[0, width] × [0, height]`; `None` if less than
    /// `min_size` remains on either side.
    pub fn clip(corners: [f64; 4], width: f64, height: f64, min_size: f64) -> Option<Self> {
        let x1 = corners[0].clamp(0.0, width);
        let y1 = corners[1].clamp(0.0, height);
        let x2 = corners[2].clamp(0.0, width);
        let y2 = corners[3].clamp(0.0, height);
        if x2 - x1 < min_size || y2 - y1 < min_size {
            return None;
        }
        Self::new(x1, y1, x2, y2).ok()
    }
}

/// A scored, labelled box. Class 0 is background and is never emitted by a detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Order by descending score, ties by ascending index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Class-agnostic greedy NMS. Returns kept indices in rank order; a box is
/// suppressed when its IoU with a kept box is strictly greater than `thresh`.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut keep: Vec<usize> = Vec::new();
    for i in ranked(scores) {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Greedy NMS run independently within each class.
///
/// The result is sorted by descending score with ties broken by the lower
/// original index.
pub fn nms_per_class(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut keep: Vec<usize> = Vec::new();
    for i in ranked(&scores) {
        let suppressed = keep
            .iter()
            .any(|&k| dets[k].class_id == dets[i].class_id && iou(&dets[k].bbox, &dets[i].bbox) > iou_thresh);
        if !suppressed {
            keep.push(i);
        }
    }
    keep.into_iter().map(|i| dets[i]).collect()
}

/// Regression target `(dx, dy, dw, dh)` taking `anchor` onto `target`.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (tx - ax) / aw,
        (ty - ay) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

/// Applies deltas to an anchor and returns raw corners, unclipped.
/// `dw`/`dh` are clamped to at most `ln 16`.
pub fn decode_corners(anchor: &BBox, deltas: [f64; 4]) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas[0] * aw;
    let cy = ay + deltas[1] * ah;
    let w = aw * deltas[2].min(DELTA_CLAMP).exp();
    let h = ah * deltas[3].min(DELTA_CLAMP).exp();
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

/// Inverse of [`encode_deltas`]. Fails only if the decoded box collapses
/// (non-finite deltas or a size underflow).
pub fn decode_deltas(anchor: &BBox, deltas: [f64; 4]) -> Result<BBox, BoxError> {
    let [x1, y1, x2, y2] = decode_corners(anchor, deltas);
    BBox::new(x1, y1, x2, y2)
}
