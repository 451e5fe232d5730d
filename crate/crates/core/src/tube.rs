//! Object tubes linked through propagation provenance, and tube rescoring.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{iou, BBox, Detection};
use crate::lattice::{Execution, LinkComponents};
use crate::motion::GrayFrame;
use crate::pru::regressor::mix;
use crate::synth::GroundTruthFrame;

/// Label a classifier returns for a tube that covers no object.
pub const BACKGROUND: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeEntry {
    pub frame: u32,
    /// Index into the dense results of `frame`.
    pub index: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Time-ordered detections of one object; frames strictly increase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub label: u32,
    pub entries: Vec<TubeEntry>,
}

impl Tube {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mean_score(&self) -> f64 {
        self.entries.iter().map(|e| e.score).sum::<f64>() / self.entries.len() as f64
    }
}

/// Groups the bottom-row detections by connected provenance (over the
/// whole graph) and class. A group with several boxes in one frame is
/// split by per-frame score rank, so every tube has one box per frame.
pub fn build_tubes(exec: &Execution) -> Vec<Tube> {
    let comps = LinkComponents::new(&exec.graph.links);
    let mut groups: BTreeMap<(usize, u32), Vec<(u32, usize)>> = BTreeMap::new();
    let mut singles = Vec::new();
    for (t, dets) in exec.dense.iter().enumerate() {
        for (i, d) in dets.iter().enumerate() {
            match comps.label(&exec.dense_ref(t as u32, i)) {
                Some(c) => groups.entry((c, d.class_id)).or_default().push((t as u32, i)),
                None => singles.push(vec![(t as u32, i)]),
            }
        }
    }
    let entry = |(t, i): (u32, usize)| {
        let d = &exec.dense[t as usize][i];
        TubeEntry {
            frame: t,
            index: i,
            bbox: d.bbox,
            score: d.score,
        }
    };
    let mut tubes = Vec::new();
    for (_, mut members) in groups {
        members.sort_by(|a, b| {
            let (da, db) = (&exec.dense[a.0 as usize][a.1], &exec.dense[b.0 as usize][b.1]);
            a.0.cmp(&b.0).then(db.score.total_cmp(&da.score)).then(a.1.cmp(&b.1))
        });
        let mut split: Vec<Vec<(u32, usize)>> = Vec::new();
        let mut rank = 0;
        for (k, &m) in members.iter().enumerate() {
            rank = if k > 0 && members[k - 1].0 == m.0 { rank + 1 } else { 0 };
            if split.len() <= rank {
                split.push(Vec::new());
            }
            split[rank].push(m);
        }
        singles.extend(split);
    }
    for members in singles {
        let label = exec.dense[members[0].0 as usize][members[0].1].class_id;
        tubes.push(Tube {
            label,
            entries: members.into_iter().map(entry).collect(),
        });
    }
    tubes.sort_by_key(|t| (t.entries[0].frame, t.entries[0].index));
    tubes
}

/// `k` entries at uniform index spacing `floor(i * len / k)`; shorter tubes
/// repeat entries.
pub fn sample_tube(t: &Tube, k: u32) -> Result<Vec<(u32, BBox)>> {
    if t.is_empty() {
        return Err(Error::invalid("cannot sample an empty tube"));
    }
    if k == 0 {
        return Err(Error::invalid("tube sample count must be at least 1"));
    }
    let n = t.len();
    Ok((0..k as usize)
        .map(|i| {
            let e = &t.entries[i * n / k as usize];
            (e.frame, e.bbox)
        })
        .collect())
}

/// Stand-in for a learned tube classifier.
pub trait TubeClassifier: Sync {
    /// Returns `(label, score)` with the score in `[0, 1]`.
    fn classify(&self, samples: &[(u32, BBox)], frames: &[GrayFrame]) -> Result<(u32, f64)>;
}

/// Always answers the same thing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantClassifier {
    pub label: u32,
    pub score: f64,
}

impl TubeClassifier for ConstantClassifier {
    fn classify(&self, _: &[(u32, BBox)], _: &[GrayFrame]) -> Result<(u32, f64)> {
        Ok((self.label, self.score))
    }
}

/// Looks up ground truth. A sample votes for the object it overlaps best
/// (IoU at least `iou_thresh`); the majority object wins if it has at least
/// half of the votes, with the vote fraction as score. Otherwise the tube is
/// background. With probability `1 - accuracy` (seeded per tube) the label
/// is replaced by a wrong one.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    gt: Arc<Vec<GroundTruthFrame>>,
    accuracy: f64,
    iou_thresh: f64,
    seed: u64,
}

impl OracleClassifier {
    pub fn new(gt: Arc<Vec<GroundTruthFrame>>, accuracy: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::config(format!("classifier accuracy {accuracy} outside [0, 1]")));
        }
        Ok(OracleClassifier {
            gt,
            accuracy,
            iou_thresh: 0.5,
            seed,
        })
    }
}

impl TubeClassifier for OracleClassifier {
    fn classify(&self, samples: &[(u32, BBox)], _: &[GrayFrame]) -> Result<(u32, f64)> {
        let mut votes: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        let mut h = self.seed;
        for (t, b) in samples {
            h = mix(h, *t as u64);
            for v in [b.x, b.y, b.w, b.h] {
                h = mix(h, v.to_bits());
            }
            let Some(frame) = self.gt.get(*t as usize) else {
                return Err(Error::invalid(format!("sample frame {t} has no ground truth")));
            };
            let best = frame
                .boxes
                .iter()
                .map(|g| (iou(&g.bbox, b), g))
                .filter(|(o, _)| *o >= self.iou_thresh)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((_, g)) = best {
                *votes.entry((g.object_id, g.class_id)).or_default() += 1;
            }
        }
        let Some((&(_, class_id), &n)) = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
            return Ok((BACKGROUND, 1.0));
        };
        if 2 * n < samples.len() {
            return Ok((BACKGROUND, 1.0));
        }
        let score = n as f64 / samples.len() as f64;
        let u = (mix(h, 0x7475_6265) >> 11) as f64 / (1u64 << 53) as f64;
        let label = if u < self.accuracy { class_id } else { class_id.wrapping_add(1) };
        Ok((label, score))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RescoreConfig {
    /// Boxes sampled per tube for the classifier.
    pub samples: u32,
    /// Cap boosted scores at 1.
    pub clamp: bool,
}

impl Default for RescoreConfig {
    fn default() -> Self {
        RescoreConfig {
            samples: 6,
            clamp: false,
        }
    }
}

/// If the classifier agrees with the tube label every score gains the
/// classifier score; otherwise every score becomes the tube's mean score.
pub fn rescore(
    t: &Tube,
    cls: &dyn TubeClassifier,
    frames: &[GrayFrame],
    cfg: &RescoreConfig,
) -> Result<Tube> {
    let samples = sample_tube(t, cfg.samples)?;
    let (label, s) = cls.classify(&samples, frames)?;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("classifier score {s} outside [0, 1]")));
    }
    let mean = t.mean_score();
    let mut out = t.clone();
    for e in &mut out.entries {
        e.score = if label == t.label {
            let boosted = e.score + s;
            if cfg.clamp {
                boosted.min(1.0)
            } else {
                boosted
            }
        } else {
            mean
        };
    }
    Ok(out)
}

/// Rescores every tube (in parallel) and writes the new scores into a copy
/// of the dense results.
pub fn rescore_dense(
    dense: &[Vec<Detection>],
    tubes: &[Tube],
    cls: &dyn TubeClassifier,
    frames: &[GrayFrame],
    cfg: &RescoreConfig,
) -> Result<(Vec<Tube>, Vec<Vec<Detection>>)> {
    let rescored: Vec<Tube> = tubes
        .par_iter()
        .map(|t| rescore(t, cls, frames, cfg))
        .collect::<Result<_>>()?;
    let mut out = dense.to_vec();
    for t in &rescored {
        for e in &t.entries {
            let d = out
                .get_mut(e.frame as usize)
                .and_then(|f| f.get_mut(e.index))
                .ok_or_else(|| Error::invalid(format!("tube entry {}:{} not in results", e.frame, e.index)))?;
            d.score = e.score;
        }
    }
    Ok((rescored, out))
}

/// Tubes before and after rescoring as JSON.
pub fn tubes_to_json(before: &[Tube], after: &[Tube]) -> Result<String> {
    #[derive(Serialize)]
    struct Record {
        label: u32,
        frames: Vec<u32>,
        boxes: Vec<BBox>,
        pre: Vec<f64>,
        post: Vec<f64>,
    }
    if before.len() != after.len() {
        return Err(Error::invalid("tube lists differ in length"));
    }
    let records: Vec<Record> = before
        .iter()
        .zip(after)
        .map(|(b, a)| Record {
            label: b.label,
            frames: b.entries.iter().map(|e| e.frame).collect(),
            boxes: b.entries.iter().map(|e| e.bbox).collect(),
            pre: b.entries.iter().map(|e| e.score).collect(),
            post: a.entries.iter().map(|e| e.score).collect(),
        })
        .collect();
    serde_json::to_string_pretty(&records).map_err(|e| Error::parse("tube dump", e))
}
