//! Box geometry: center-size boxes, R-CNN delta coding, IoU, per-class NMS
//! and greedy IoU matching.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in center form, pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    /// Builds a box from corner coordinates `(x0, y0, x1, y1)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            x: 0.5 * (x0 + x1),
            y: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        (self.x - hw, self.y - hh, self.x + hw, self.y + hh)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    /// Multiplies every coordinate by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        BBox {
            x: self.x * factor,
            y: self.y * factor,
            w: self.w * factor,
            h: self.h * factor,
        }
    }

    /// Same center, sides multiplied by `factor`.
    pub fn expanded(&self, factor: f64) -> Self {
        BBox {
            x: self.x,
            y: self.y,
            w: self.w * factor,
            h: self.h * factor,
        }
    }

    /// Intersection with the `[0, width] x [0, height]` image rectangle, or
    /// `None` when nothing is left.
    pub fn clip_to(&self, width: f64, height: f64) -> Option<BBox> {
        let (x0, y0, x1, y1) = self.corners();
        let (x0, y0) = (x0.max(0.0), y0.max(0.0));
        let (x1, y1) = (x1.min(width), y1.min(height));
        if x1 > x0 && y1 > y0 {
            Some(BBox::from_corners(x0, y0, x1, y1))
        } else {
            None
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = ax1.min(bx1) - ax0.max(bx0);
        let ih = ay1.min(by1) - ay0.max(by0);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

/// A box with a category and a confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: u32,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: u32, score: f64) -> Self {
        Detection {
            bbox,
            class_id,
            score,
        }
    }
}

/// R-CNN box delta `(dx, dy, dw, dh)` of one box relative to another.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        BoxDelta { dx, dy, dw, dh }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxDelta::new(a[0], a[1], a[2], a[3])
    }
}

/// Intersection over union. Zero for non-overlapping boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Delta that maps `src` onto `dst`.
pub fn encode_delta(src: &BBox, dst: &BBox) -> BoxDelta {
    BoxDelta {
        dx: (dst.x - src.x) / src.w,
        dy: (dst.y - src.y) / src.h,
        dw: (dst.w / src.w).ln(),
        dh: (dst.h / src.h).ln(),
    }
}

/// Applies `delta` to `src`. Exact inverse of [`encode_delta`].
pub fn decode_delta(src: &BBox, delta: &BoxDelta) -> BBox {
    BBox {
        x: src.x + delta.dx * src.w,
        y: src.y + delta.dy * src.h,
        w: src.w * delta.dw.exp(),
        h: src.h * delta.dh.exp(),
    }
}

/// [`decode_delta`] followed by clipping to `[0, width] x [0, height]`.
/// Falls back to the unclipped box if it lies entirely outside the image.
pub fn decode_delta_clamped(src: &BBox, delta: &BoxDelta, width: f64, height: f64) -> BBox {
    let out = decode_delta(src, delta);
    out.clip_to(width, height).unwrap_or(out)
}

/// Result of [`nms`]. Indices refer to the input slice.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NmsOutput {
    /// Kept detections in descending score order.
    pub kept: Vec<usize>,
    /// `(suppressed, keeper)` pairs, one per suppressed detection.
    pub suppressed: Vec<(usize, usize)>,
}

impl NmsOutput {
    pub fn kept_detections(&self, dets: &[Detection]) -> Vec<Detection> {
        self.kept.iter().map(|&i| dets[i]).collect()
    }
}

/// Indices sorted by descending score; ties keep input order.
fn by_score_desc(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy per-class non-maximum suppression.
///
/// A detection is suppressed by the first higher-ranked kept detection of the
/// same class whose IoU with it exceeds `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> NmsOutput {
    let mut out = NmsOutput::default();
    for i in by_score_desc(dets) {
        let keeper = out.kept.iter().copied().find(|&k| {
            dets[k].class_id == dets[i].class_id && iou(&dets[k].bbox, &dets[i].bbox) > iou_thresh
        });
        match keeper {
            Some(k) => out.suppressed.push((i, k)),
            None => out.kept.push(i),
        }
    }
    out
}

/// Default confidence floor for [`greedy_match`] when measuring easiness.
pub const MATCH_SCORE_FLOOR: f64 = 0.8;
/// Default IoU floor for [`greedy_match`].
pub const MATCH_IOU_FLOOR: f64 = 0.3;

/// Greedy same-class matching by descending IoU.
///
/// Only detections with `score >= score_floor` take part, and only pairs with
/// `IoU >= iou_floor`. Returns `(index_in_a, index_in_b)` pairs; no index is
/// used twice. Ties in IoU are broken by `(index_in_a, index_in_b)`.
pub fn greedy_match(
    a: &[Detection],
    b: &[Detection],
    score_floor: f64,
    iou_floor: f64,
) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (i, da) in a.iter().enumerate() {
        if da.score < score_floor {
            continue;
        }
        for (j, db) in b.iter().enumerate() {
            if db.score < score_floor || db.class_id != da.class_id {
                continue;
            }
            let o = iou(&da.bbox, &db.bbox);
            if o >= iou_floor && o > 0.0 {
                candidates.push((o, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));

    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}
