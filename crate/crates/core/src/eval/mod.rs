//! Detection metrics: VOC all-points AP, mAP, recall and the motion-speed
//! breakdown, plus sweep orchestration.

mod sweep;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{iou, Detection};
use crate::synth::{GroundTruthFrame, GtBox};

pub use sweep::{sweep, SweepAxes, SweepRow, SWEEP_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    /// Objects whose mean IoU over `frame_gap` frames is at least this are slow.
    pub slow_iou: f64,
    /// Below this they are fast; anything between is medium.
    pub fast_iou: f64,
    pub frame_gap: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            slow_iou: 0.9,
            fast_iou: 0.7,
            frame_gap: 10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_thresh > 0.0 && self.iou_thresh < 1.0) {
            return Err(Error::config(format!("iou_thresh {} outside (0, 1)", self.iou_thresh)));
        }
        if !(self.fast_iou <= self.slow_iou) {
            return Err(Error::config("fast_iou must not exceed slow_iou"));
        }
        if self.frame_gap == 0 {
            return Err(Error::config("frame_gap must be at least 1"));
        }
        Ok(())
    }
}

fn check_inputs(dets: &[Vec<Detection>], gt: &[GroundTruthFrame], iou_thresh: f64) -> Result<()> {
    if dets.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{} frames of detections against {} frames of ground truth",
            dets.len(),
            gt.len()
        )));
    }
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::invalid(format!("iou_thresh {iou_thresh} outside (0, 1)")));
    }
    if let Some(d) = dets.iter().flatten().find(|d| !d.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite detection score {}", d.score)));
    }
    Ok(())
}

/// Greedy score-ordered matching for one class. Returns the TP/FP flag of
/// every counted detection in rank order and the number of counted ground
/// truth boxes. Detections that only hit an excluded box are dropped.
fn match_class(
    dets: &[Vec<Detection>],
    gt: &[GroundTruthFrame],
    class_id: u32,
    iou_thresh: f64,
    include: &dyn Fn(u32, &GtBox) -> bool,
) -> (Vec<bool>, usize) {
    let mut order: Vec<(u32, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(t, ds)| {
            ds.iter()
                .enumerate()
                .filter(|(_, d)| d.class_id == class_id)
                .map(move |(i, _)| (t as u32, i))
        })
        .collect();
    order.sort_by(|a, b| {
        let (sa, sb) = (dets[a.0 as usize][a.1].score, dets[b.0 as usize][b.1].score);
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    let n_pos = gt
        .iter()
        .map(|f| f.boxes.iter().filter(|g| g.class_id == class_id && include(f.frame, g)).count())
        .sum();
    let mut used: Vec<Vec<bool>> = gt.iter().map(|f| vec![false; f.boxes.len()]).collect();
    let mut flags = Vec::with_capacity(order.len());
    for (t, i) in order {
        let d = &dets[t as usize][i];
        let frame = &gt[t as usize];
        let mut best: Option<(f64, usize)> = None;
        let mut hits_excluded = false;
        for (j, g) in frame.boxes.iter().enumerate() {
            if g.class_id != class_id {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o < iou_thresh {
                continue;
            }
            if !include(frame.frame, g) {
                hits_excluded = true;
            } else if !used[t as usize][j] && best.map_or(true, |(b, _)| o > b) {
                best = Some((o, j));
            }
        }
        match best {
            Some((_, j)) => {
                used[t as usize][j] = true;
                flags.push(true);
            }
            None if hits_excluded => {}
            None => flags.push(false),
        }
    }
    (flags, n_pos)
}

/// All-points interpolated area under the precision/recall curve.
fn area(flags: &[bool], n_pos: usize) -> f64 {
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        rec.push(tp as f64 / n_pos as f64);
        prec.push(tp as f64 / (tp + fp) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len())
        .filter(|&i| rec[i] != rec[i - 1])
        .map(|i| (rec[i] - rec[i - 1]) * prec[i])
        .sum()
}

fn masked_ap(
    dets: &[Vec<Detection>],
    gt: &[GroundTruthFrame],
    class_id: u32,
    iou_thresh: f64,
    include: &dyn Fn(u32, &GtBox) -> bool,
) -> Option<f64> {
    let (flags, n_pos) = match_class(dets, gt, class_id, iou_thresh, include);
    (n_pos > 0).then(|| area(&flags, n_pos))
}

/// VOC all-points AP of one class. `None` when the class never occurs in
/// the ground truth.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gt: &[GroundTruthFrame],
    class_id: u32,
    iou_thresh: f64,
) -> Result<Option<f64>> {
    check_inputs(dets, gt, iou_thresh)?;
    Ok(masked_ap(dets, gt, class_id, iou_thresh, &|_, _| true))
}

fn gt_classes(gt: &[GroundTruthFrame]) -> BTreeSet<u32> {
    gt.iter().flat_map(|f| f.boxes.iter().map(|g| g.class_id)).collect()
}

fn masked_map(
    dets: &[Vec<Detection>],
    gt: &[GroundTruthFrame],
    iou_thresh: f64,
    include: &dyn Fn(u32, &GtBox) -> bool,
) -> (Option<f64>, BTreeMap<u32, f64>) {
    let per: BTreeMap<u32, f64> = gt_classes(gt)
        .into_iter()
        .filter_map(|c| masked_ap(dets, gt, c, iou_thresh, include).map(|ap| (c, ap)))
        .collect();
    let map = (!per.is_empty()).then(|| per.values().sum::<f64>() / per.len() as f64);
    (map, per)
}

/// Mean AP over the classes present in the ground truth, plus the per-class
/// values. The mean is `None` without any ground truth.
pub fn mean_average_precision(
    dets: &[Vec<Detection>],
    gt: &[GroundTruthFrame],
    iou_thresh: f64,
) -> Result<(Option<f64>, BTreeMap<u32, f64>)> {
    check_inputs(dets, gt, iou_thresh)?;
    Ok(masked_map(dets, gt, iou_thresh, &|_, _| true))
}

/// Fraction of ground truth boxes matched by the greedy per-class matching.
pub fn recall(dets: &[Vec<Detection>], gt: &[GroundTruthFrame], iou_thresh: f64) -> Result<f64> {
    check_inputs(dets, gt, iou_thresh)?;
    let (mut tp, mut n) = (0, 0);
    for c in gt_classes(gt) {
        let (flags, n_pos) = match_class(dets, gt, c, iou_thresh, &|_, _| true);
        tp += flags.iter().filter(|&&f| f).count();
        n += n_pos;
    }
    Ok(if n == 0 { 0.0 } else { tp as f64 / n as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionBucket {
    Slow,
    Medium,
    Fast,
}

/// Mean IoU of each object with itself `gap` frames later. Objects seen in
/// no such pair count as motionless (1.0).
pub fn object_motion(gt: &[GroundTruthFrame], gap: u32) -> BTreeMap<u32, f64> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (t, f) in gt.iter().enumerate() {
        let later = gt.get(t + gap as usize);
        for g in &f.boxes {
            let e = acc.entry(g.object_id).or_insert((0.0, 0));
            if let Some(o) = later.and_then(|l| l.find(g.object_id)) {
                e.0 += iou(&g.bbox, &o.bbox);
                e.1 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|(id, (s, n))| (id, if n == 0 { 1.0 } else { s / n as f64 }))
        .collect()
}

pub fn bucket_of(motion_iou: f64, cfg: &EvalConfig) -> MotionBucket {
    if motion_iou >= cfg.slow_iou {
        MotionBucket::Slow
    } else if motion_iou < cfg.fast_iou {
        MotionBucket::Fast
    } else {
        MotionBucket::Medium
    }
}

/// Per-bucket mAP; `None` for empty buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub slow: Option<f64>,
    pub medium: Option<f64>,
    pub fast: Option<f64>,
    /// Ground truth boxes per bucket, in slow/medium/fast order.
    pub gt_counts: [usize; 3],
}

/// mAP per motion bucket: ground truth of other buckets is ignored, and so
/// are detections that only hit ignored boxes.
pub fn map_by_motion(
    dets: &[Vec<Detection>],
    gt: &[GroundTruthFrame],
    cfg: &EvalConfig,
) -> Result<Breakdown> {
    cfg.validate()?;
    check_inputs(dets, gt, cfg.iou_thresh)?;
    let buckets: BTreeMap<u32, MotionBucket> = object_motion(gt, cfg.frame_gap)
        .into_iter()
        .map(|(id, m)| (id, bucket_of(m, cfg)))
        .collect();
    let mut counts = [0; 3];
    for g in gt.iter().flat_map(|f| &f.boxes) {
        counts[buckets[&g.object_id] as usize] += 1;
    }
    let one = |b: MotionBucket| masked_map(dets, gt, cfg.iou_thresh, &|_, g| buckets[&g.object_id] == b).0;
    Ok(Breakdown {
        slow: one(MotionBucket::Slow),
        medium: one(MotionBucket::Medium),
        fast: one(MotionBucket::Fast),
        gt_counts: counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    pub per_class_ap: Vec<ClassAp>,
    pub recall: f64,
    pub breakdown: Breakdown,
    pub n_frames: u32,
    pub total_cost_ms: f64,
    /// `1000 * n_frames / total_cost_ms`.
    pub effective_fps: f64,
}

/// Every metric for one run. Errors when the ground truth is empty, since
/// mAP is undefined then.
pub fn evaluate(
    dets: &[Vec<Detection>],
    gt: &[GroundTruthFrame],
    total_cost_ms: f64,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    cfg.validate()?;
    let (map, per) = mean_average_precision(dets, gt, cfg.iou_thresh)?;
    let map = map.ok_or_else(|| Error::invalid("ground truth is empty, mAP is undefined"))?;
    let n_frames = gt.len() as u32;
    Ok(EvalResult {
        map,
        per_class_ap: per.into_iter().map(|(class_id, ap)| ClassAp { class_id, ap }).collect(),
        recall: recall(dets, gt, cfg.iou_thresh)?,
        breakdown: map_by_motion(dets, gt, cfg)?,
        n_frames,
        total_cost_ms,
        effective_fps: if total_cost_ms > 0.0 {
            1000.0 * n_frames as f64 / total_cost_ms
        } else {
            f64::INFINITY
        },
    })
}
