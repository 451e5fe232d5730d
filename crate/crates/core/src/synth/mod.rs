//! Synthetic world: scripted trajectories rendered to grayscale frames with
//! exact ground truth, and a simulated detector.

mod detector;
pub mod jsonl;
pub mod presets;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{iou, BBox};
use crate::motion::GrayFrame;

pub use detector::{
    simulate_detection, Detector, DetectorProfile, ScoreModel, SimulatedDetector,
};
pub use presets::{preset, Scenario, DEFAULT_FRAMES, PRESET_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    #[default]
    Rect,
    Ellipse,
}

/// Box of an object at a given frame. Serialized as `[frame, cx, cy, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(u32, f64, f64, f64, f64)", into = "(u32, f64, f64, f64, f64)")]
pub struct Keypoint {
    pub frame: u32,
    pub bbox: BBox,
}

impl From<(u32, f64, f64, f64, f64)> for Keypoint {
    fn from((frame, x, y, w, h): (u32, f64, f64, f64, f64)) -> Self {
        Keypoint {
            frame,
            bbox: BBox::new(x, y, w, h),
        }
    }
}

impl From<Keypoint> for (u32, f64, f64, f64, f64) {
    fn from(k: Keypoint) -> Self {
        (k.frame, k.bbox.x, k.bbox.y, k.bbox.w, k.bbox.h)
    }
}

/// Piecewise-linear object trajectory. The box is held constant before the
/// first and after the last keypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryScript {
    pub object_id: u32,
    pub class_id: u32,
    pub keypoints: Vec<Keypoint>,
    pub intensity: u8,
    #[serde(default)]
    pub shape: Shape,
}

impl TrajectoryScript {
    pub fn validate(&self) -> Result<()> {
        if self.keypoints.is_empty() {
            return Err(Error::invalid(format!(
                "object {} has no keypoints",
                self.object_id
            )));
        }
        if self.keypoints.windows(2).any(|k| k[0].frame >= k[1].frame) {
            return Err(Error::invalid(format!(
                "object {} keypoints are not strictly sorted by frame",
                self.object_id
            )));
        }
        if self.keypoints.iter().any(|k| !k.bbox.is_valid()) {
            return Err(Error::invalid(format!(
                "object {} has a non-positive size",
                self.object_id
            )));
        }
        Ok(())
    }

    pub fn box_at(&self, frame: u32) -> BBox {
        let kp = &self.keypoints;
        let i = kp.partition_point(|k| k.frame <= frame);
        if i == 0 {
            return kp[0].bbox;
        }
        if i == kp.len() {
            return kp[kp.len() - 1].bbox;
        }
        let (a, b) = (&kp[i - 1], &kp[i]);
        let f = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
        let lerp = |p: f64, q: f64| p + (q - p) * f;
        BBox::new(
            lerp(a.bbox.x, b.bbox.x),
            lerp(a.bbox.y, b.bbox.y),
            lerp(a.bbox.w, b.bbox.w),
            lerp(a.bbox.h, b.bbox.h),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: u32,
    pub object_id: u32,
}

/// Ground truth of one frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub frame: u32,
    pub boxes: Vec<GtBox>,
}

impl GroundTruthFrame {
    pub fn find(&self, object_id: u32) -> Option<&GtBox> {
        self.boxes.iter().find(|b| b.object_id == object_id)
    }
}

/// Rendered frames plus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedVideo {
    pub frames: Vec<GrayFrame>,
    pub gt: Vec<GroundTruthFrame>,
}

impl RenderedVideo {
    pub fn n_frames(&self) -> u32 {
        self.frames.len() as u32
    }

    pub fn width(&self) -> u32 {
        self.frames[0].width
    }

    pub fn height(&self) -> u32 {
        self.frames[0].height
    }
}

fn inside(shape: Shape, b: &BBox, px: f64, py: f64) -> bool {
    let dx = (px - b.x) / (0.5 * b.w);
    let dy = (py - b.y) / (0.5 * b.h);
    match shape {
        Shape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        Shape::Ellipse => dx * dx + dy * dy <= 1.0,
    }
}

fn render_frame(
    scripts: &[TrajectoryScript],
    width: u32,
    height: u32,
    frame: u32,
    background: u8,
) -> (GrayFrame, GroundTruthFrame) {
    let mut img = GrayFrame::filled(width, height, background);
    let mut gt = GroundTruthFrame {
        frame,
        boxes: Vec::with_capacity(scripts.len()),
    };
    for s in scripts {
        let b = s.box_at(frame);
        let Some(vis) = b.clip_to(width as f64, height as f64) else {
            continue;
        };
        let (x0, y0, x1, y1) = vis.corners();
        let xs = (x0 - 0.5).ceil().max(0.0) as u32..((x1 - 0.5).floor() + 1.0).min(width as f64) as u32;
        let ys = (y0 - 0.5).ceil().max(0.0) as u32..((y1 - 0.5).floor() + 1.0).min(height as f64) as u32;
        for y in ys {
            for x in xs.clone() {
                if inside(s.shape, &b, x as f64 + 0.5, y as f64 + 0.5) {
                    img.set(x, y, s.intensity);
                }
            }
        }
        gt.boxes.push(GtBox {
            bbox: vis,
            class_id: s.class_id,
            object_id: s.object_id,
        });
    }
    (img, gt)
}

/// Renders every frame of a scripted scene. Later scripts draw over earlier
/// ones; ground-truth boxes are clipped to the image and omitted when fully
/// outside it.
pub fn render_video(
    scripts: &[TrajectoryScript],
    width: u32,
    height: u32,
    n_frames: u32,
    background: u8,
) -> Result<RenderedVideo> {
    if width == 0 || height == 0 || n_frames == 0 {
        return Err(Error::invalid(format!(
            "video dimensions must be positive, got {width}x{height}x{n_frames}"
        )));
    }
    for s in scripts {
        s.validate()?;
    }
    let mut ids: Vec<u32> = scripts.iter().map(|s| s.object_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("object ids must be unique"));
    }
    let (frames, gt) = (0..n_frames)
        .into_par_iter()
        .map(|t| render_frame(scripts, width, height, t, background))
        .unzip();
    Ok(RenderedVideo { frames, gt })
}

/// IoU of one object's boxes in two frames; lower means faster motion.
pub fn motion_magnitude(
    gt_prev: &GroundTruthFrame,
    gt_next: &GroundTruthFrame,
    object_id: u32,
) -> Result<f64> {
    fn find(g: &GroundTruthFrame, object_id: u32) -> Result<&GtBox> {
        g.find(object_id).ok_or_else(|| {
            Error::invalid(format!("object {object_id} absent from frame {}", g.frame))
        })
    }
    Ok(iou(&find(gt_prev, object_id)?.bbox, &find(gt_next, object_id)?.bbox))
}
