//! Propagation and refinement unit: bidirectional temporal propagation to a
//! midpoint, per-class merging, coarse-to-fine refinement and endpoint
//! rescaling, plus the regressors that drive them and their training.

pub mod loss;
pub mod regressor;
pub mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{decode_delta_clamped, nms, Detection};
use crate::motion::{
    appearance_features, build_motion_rep, roi_motion_features, GrayFrame, MhiParams, MotionRep,
};

pub use loss::{joint_loss, smooth_l1, smooth_l1_grad};
pub use regressor::{
    IdentityRegressor, LinearRegressor, OracleMode, OracleRegressor, RegressionQuery, Regressor,
    FEATURE_VERSION,
};
pub use train::{
    joint_objective, train_regressors, JointBatch, PruVariant, TrainConfig, TrainedPru,
    TrainingSet,
};

fn default_levels() -> Vec<f64> {
    vec![0.5, 0.75, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruConfig {
    /// Image rescale factor per lattice row, ascending, ending at 1.
    pub scale_levels: Vec<f64>,
    pub lambda: f64,
    pub smooth_l1_beta: f64,
    pub nms_thresh: f64,
    /// Feature window around a box for propagation, as a multiple of its size.
    pub propagation_expand: f64,
    /// Same for refinement.
    pub refine_expand: f64,
    /// Interior frames sampled into the motion history.
    pub max_mhi_samples: u32,
    pub mhi: MhiParams,
}

impl Default for PruConfig {
    fn default() -> Self {
        PruConfig {
            scale_levels: default_levels(),
            lambda: 1.0,
            smooth_l1_beta: 1.0,
            nms_thresh: 0.5,
            propagation_expand: 4.0,
            refine_expand: 2.0,
            max_mhi_samples: 5,
            mhi: MhiParams::default(),
        }
    }
}

impl PruConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.scale_levels;
        if l.is_empty() || l.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("scale_levels must be positive and non-empty"));
        }
        if l.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("scale_levels must be strictly ascending"));
        }
        if (l[l.len() - 1] - 1.0).abs() > 1e-12 {
            return Err(Error::config("the last scale level must be 1.0"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::config("lambda must be positive"));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::config("smooth_l1_beta must be positive"));
        }
        if !(0.0..=1.0).contains(&self.nms_thresh) {
            return Err(Error::config("nms_thresh must lie in [0, 1]"));
        }
        if !(self.propagation_expand >= 1.0) || !(self.refine_expand >= 1.0) {
            return Err(Error::config("feature windows must be at least the box size"));
        }
        Ok(())
    }

    pub fn n_levels(&self) -> usize {
        self.scale_levels.len()
    }
}

/// How boxes travel between key frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropagationMethod {
    /// Regression over motion history features.
    Mhi,
    /// The same regression over a single thresholded frame difference.
    Rgbdiff,
    /// No propagation; intermediate frames are interpolated between key frames.
    Interp,
}

impl PropagationMethod {
    pub const ALL: [PropagationMethod; 3] = [
        PropagationMethod::Mhi,
        PropagationMethod::Interp,
        PropagationMethod::Rgbdiff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PropagationMethod::Mhi => "mhi",
            PropagationMethod::Rgbdiff => "rgbdiff",
            PropagationMethod::Interp => "interp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown propagator '{s}' (mhi, interp, rgbdiff)")))
    }

    /// Interior samples for the motion raster, `None` for interpolation.
    pub fn motion_samples(self, cfg: &PruConfig) -> Option<u32> {
        match self {
            PropagationMethod::Mhi => Some(cfg.max_mhi_samples),
            PropagationMethod::Rgbdiff => Some(0),
            PropagationMethod::Interp => None,
        }
    }
}

/// Frames resampled to every scale level.
#[derive(Debug, Clone)]
pub struct ScalePyramid {
    pub levels: Vec<f64>,
    frames: Vec<Vec<GrayFrame>>,
}

impl ScalePyramid {
    pub fn build(frames: &[GrayFrame], levels: &[f64]) -> Self {
        let frames = levels
            .iter()
            .map(|&s| frames.par_iter().map(|f| f.resample(s)).collect())
            .collect();
        ScalePyramid {
            levels: levels.to_vec(),
            frames,
        }
    }

    pub fn frames(&self, level: usize) -> &[GrayFrame] {
        &self.frames[level]
    }

    pub fn frame(&self, level: usize, t: u32) -> &GrayFrame {
        &self.frames[level][t as usize]
    }

    pub fn n_frames(&self) -> u32 {
        self.frames.first().map_or(0, |f| f.len() as u32)
    }
}

/// Lattice position: frame index and row (index into the scale levels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodePos {
    pub time: u32,
    pub level: u8,
}

impl NodePos {
    pub fn new(time: u32, level: usize) -> Self {
        NodePos {
            time,
            level: level as u8,
        }
    }
}

/// One detection inside a node's list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DetRef {
    pub node: NodePos,
    pub index: usize,
}

/// Undirected "same object" relation between two detections.
pub type Link = (DetRef, DetRef);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagatedBox {
    pub det: Detection,
    pub source_node: NodePos,
    pub source_index: usize,
    pub direction: Direction,
}

impl PropagatedBox {
    pub fn source(&self) -> DetRef {
        DetRef {
            node: self.source_node,
            index: self.source_index,
        }
    }
}

/// Moves each detection of `source` along `m` with `reg`.
///
/// `scale` is the resolution factor of `m`'s rasters; boxes are in those
/// coordinates. Class and score are carried over.
pub fn propagate(
    dets: &[Detection],
    source: NodePos,
    m: &MotionRep,
    scale: f64,
    reg: &dyn Regressor,
    expand: f64,
) -> Vec<PropagatedBox> {
    let direction = if m.is_forward() {
        Direction::Forward
    } else {
        Direction::Backward
    };
    let (w, h) = (m.mhi.width as f64, m.mhi.height as f64);
    dets.iter()
        .enumerate()
        .map(|(i, d)| {
            let features = roi_motion_features(m, &d.bbox, expand);
            let delta = reg.predict(&RegressionQuery {
                features: &features,
                roi: d.bbox,
                scale,
                t_from: m.t_start,
                t_to: m.t_end,
                class_id: d.class_id,
            });
            PropagatedBox {
                det: Detection::new(decode_delta_clamped(&d.bbox, &delta, w, h), d.class_id, d.score),
                source_node: source,
                source_index: i,
                direction,
            }
        })
        .collect()
}

/// Union of both propagation directions followed by per-class NMS.
///
/// Kept boxes come back in descending score order. Every suppressed box
/// yields a link between its source and the keeper's source.
pub fn merge_bidirectional(
    left: &[PropagatedBox],
    right: &[PropagatedBox],
    nms_thresh: f64,
) -> (Vec<PropagatedBox>, Vec<Link>) {
    let all: Vec<PropagatedBox> = left.iter().chain(right).copied().collect();
    let dets: Vec<Detection> = all.iter().map(|p| p.det).collect();
    let out = nms(&dets, nms_thresh);
    let kept = out.kept.iter().map(|&i| all[i]).collect();
    let links = out
        .suppressed
        .iter()
        .map(|&(s, k)| (all[s].source(), all[k].source()))
        .collect();
    (kept, links)
}

/// Rescales boxes to `scale_to` and corrects them with appearance features
/// pooled from `frame` (already at `scale_to`). Provenance is preserved.
pub fn refine(
    boxes: &[PropagatedBox],
    frame: &GrayFrame,
    time: u32,
    scale_from: f64,
    scale_to: f64,
    reg: &dyn Regressor,
    expand: f64,
) -> Vec<PropagatedBox> {
    let k = scale_to / scale_from;
    let (w, h) = (frame.width as f64, frame.height as f64);
    boxes
        .iter()
        .map(|p| {
            let roi = p.det.bbox.scaled(k);
            let features = appearance_features(frame, &roi, expand);
            let delta = reg.predict(&RegressionQuery {
                features: &features,
                roi,
                scale: scale_to,
                t_from: time,
                t_to: time,
                class_id: p.det.class_id,
            });
            PropagatedBox {
                det: Detection::new(decode_delta_clamped(&roi, &delta, w, h), p.det.class_id, p.det.score),
                ..*p
            }
        })
        .collect()
}

/// Pure coordinate change between two scale factors.
pub fn rescale(dets: &[Detection], scale_from: f64, scale_to: f64) -> Vec<Detection> {
    let k = scale_to / scale_from;
    dets.iter()
        .map(|d| Detection::new(d.bbox.scaled(k), d.class_id, d.score))
        .collect()
}

/// Propagate-then-refine, or propagate-then-rescale for the single-step unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnitMode {
    #[default]
    TwoStep,
    SingleStep,
}

pub struct UnitInput<'a> {
    pub left: &'a [Detection],
    pub right: &'a [Detection],
    pub t_left: u32,
    pub t_right: u32,
    /// Row of the inputs; outputs land on `level + 1`.
    pub level: usize,
}

#[derive(Debug, Clone)]
pub struct UnitOutput {
    pub mid: u32,
    pub forward: Vec<PropagatedBox>,
    pub backward: Vec<PropagatedBox>,
    /// Merged midpoint boxes before refinement, at the input row.
    pub merged: Vec<PropagatedBox>,
    pub mid_out: Vec<PropagatedBox>,
    pub left_out: Vec<Detection>,
    pub right_out: Vec<Detection>,
    pub links: Vec<Link>,
}

/// Motion raster from `from` toward `to` at one pyramid level.
pub fn motion_between(
    pyr: &ScalePyramid,
    level: usize,
    from: u32,
    to: u32,
    samples: u32,
    params: MhiParams,
) -> Result<MotionRep> {
    build_motion_rep(pyr.frames(level), from, to, samples, params)
}

/// One full unit between two key frames on the same row.
pub fn run_unit(
    input: &UnitInput,
    pyr: &ScalePyramid,
    cfg: &PruConfig,
    method: PropagationMethod,
    reg_t: &dyn Regressor,
    reg_s: &dyn Regressor,
    mode: UnitMode,
) -> Result<UnitOutput> {
    let UnitInput {
        left,
        right,
        t_left,
        t_right,
        level,
    } = *input;
    if t_left + 1 >= t_right {
        return Err(Error::invalid(format!(
            "unit needs an interior midpoint, got [{t_left}, {t_right}]"
        )));
    }
    if level + 1 >= cfg.n_levels() {
        return Err(Error::invalid(format!("no scale level above {level}")));
    }
    let samples = method
        .motion_samples(cfg)
        .ok_or_else(|| Error::invalid("interpolation has no propagation unit"))?;
    let mid = (t_left + t_right) / 2;
    let s_from = cfg.scale_levels[level];
    let s_to = cfg.scale_levels[level + 1];

    let m_fwd = motion_between(pyr, level, t_left, mid, samples, cfg.mhi)?;
    let m_bwd = motion_between(pyr, level, t_right, mid, samples, cfg.mhi)?;
    let forward = propagate(
        left,
        NodePos::new(t_left, level),
        &m_fwd,
        s_from,
        reg_t,
        cfg.propagation_expand,
    );
    let backward = propagate(
        right,
        NodePos::new(t_right, level),
        &m_bwd,
        s_from,
        reg_t,
        cfg.propagation_expand,
    );
    let (merged, links) = merge_bidirectional(&forward, &backward, cfg.nms_thresh);
    let mid_out = match mode {
        UnitMode::TwoStep => refine(
            &merged,
            pyr.frame(level + 1, mid),
            mid,
            s_from,
            s_to,
            reg_s,
            cfg.refine_expand,
        ),
        UnitMode::SingleStep => merged
            .iter()
            .map(|p| PropagatedBox {
                det: Detection::new(p.det.bbox.scaled(s_to / s_from), p.det.class_id, p.det.score),
                ..*p
            })
            .collect(),
    };
    Ok(UnitOutput {
        mid,
        forward,
        backward,
        merged,
        mid_out,
        left_out: rescale(left, s_from, s_to),
        right_out: rescale(right, s_from, s_to),
        links,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BBox;

    fn pbox(x: f64, class_id: u32, score: f64, node: u32, index: usize) -> PropagatedBox {
        PropagatedBox {
            det: Detection::new(BBox::new(x, 10.0, 10.0, 10.0), class_id, score),
            source_node: NodePos::new(node, 0),
            source_index: index,
            direction: Direction::Forward,
        }
    }

    #[test]
    fn config_validation() {
        PruConfig::default().validate().unwrap();
        let bad = |f: fn(&mut PruConfig)| {
            let mut c = PruConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.scale_levels = vec![0.5, 0.5, 1.0]));
        assert!(bad(|c| c.scale_levels = vec![0.5, 0.75]));
        assert!(bad(|c| c.lambda = 0.0));
        assert!(bad(|c| c.nms_thresh = 1.5));
    }

    #[test]
    fn merge_examples() {
        let left = vec![pbox(10.0, 0, 0.9, 0, 0), pbox(50.0, 0, 0.8, 0, 1)];
        let (kept, links) = merge_bidirectional(&left, &[], 0.5);
        assert_eq!(kept, left);
        assert!(links.is_empty());

        let right = vec![pbox(10.5, 0, 0.7, 8, 0), pbox(50.0, 1, 0.95, 8, 1)];
        let (kept, links) = merge_bidirectional(&left, &right, 0.5);
        assert_eq!(kept.len(), 3);
        assert_eq!(links.len(), 1);
        let (s, k) = links[0];
        assert_eq!((s.node.time, s.index), (8, 0));
        assert_eq!((k.node.time, k.index), (0, 0));
    }

    #[test]
    fn rescale_examples() {
        let d = [Detection::new(BBox::new(3.0, 4.0, 5.0, 6.0), 0, 0.5)];
        assert_eq!(rescale(&d, 0.75, 0.75), d.to_vec());
        let up = rescale(&d, 0.5, 1.0);
        assert_eq!(up[0].bbox, BBox::new(6.0, 8.0, 10.0, 12.0));
    }

    #[test]
    fn identity_propagation_copies() {
        let frames: Vec<GrayFrame> = (0..5).map(|_| GrayFrame::filled(32, 32, 10)).collect();
        let m = build_motion_rep(&frames, 0, 4, 5, MhiParams::default()).unwrap();
        let d = [Detection::new(BBox::new(8.0, 8.0, 6.0, 6.0), 2, 0.4)];
        let out = propagate(&d, NodePos::new(0, 0), &m, 1.0, &IdentityRegressor, 3.0);
        assert_eq!(out[0].det, d[0]);
        assert_eq!(out[0].direction, Direction::Forward);
        assert!(propagate(&[], NodePos::new(0, 0), &m, 1.0, &IdentityRegressor, 3.0).is_empty());
    }

    #[test]
    fn identity_refine_only_rescales() {
        let frame = GrayFrame::filled(64, 64, 0);
        let p = [pbox(10.0, 0, 0.5, 0, 3)];
        let out = refine(&p, &frame, 0, 0.5, 1.0, &IdentityRegressor, 2.0);
        assert_eq!(out[0].det.bbox, BBox::new(20.0, 20.0, 20.0, 20.0));
        assert_eq!(out[0].source_index, 3);
    }
}
