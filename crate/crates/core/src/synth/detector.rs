use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{iou, BBox, Detection};

use super::{GroundTruthFrame, RenderedVideo};

/// Gaussian score model for true and false positives, truncated to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreModel {
    pub tp_mean: f64,
    pub tp_sigma: f64,
    pub fp_mean: f64,
    pub fp_sigma: f64,
}

/// Behaviour of the simulated image detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorProfile {
    /// Std-dev of center and log-size jitter, relative to box size.
    pub loc_noise_rel: f64,
    pub miss_base: f64,
    /// Extra miss probability when `sqrt(area) < small_size`.
    pub miss_small_boost: f64,
    /// Extra miss probability when the object's frame-to-frame IoU is below
    /// `fast_iou`.
    pub miss_fast_boost: f64,
    /// Mean number of false positives per frame.
    pub fp_rate: f64,
    pub score: ScoreModel,
    pub latency_ms: f64,
    pub seed: u64,
    pub small_size: f64,
    pub fast_iou: f64,
    /// False positives draw their class from `0..n_classes`.
    pub n_classes: u32,
    /// Side length range of false-positive boxes, in pixels.
    pub fp_size: (f64, f64),
}

impl Default for DetectorProfile {
    fn default() -> Self {
        DetectorProfile {
            loc_noise_rel: 0.05,
            miss_base: 0.05,
            miss_small_boost: 0.1,
            miss_fast_boost: 0.1,
            fp_rate: 0.3,
            score: ScoreModel {
                tp_mean: 0.85,
                tp_sigma: 0.1,
                fp_mean: 0.35,
                fp_sigma: 0.15,
            },
            // 7 fps
            latency_ms: 143.0,
            seed: 0,
            small_size: 20.0,
            fast_iou: 0.8,
            n_classes: 3,
            fp_size: (12.0, 40.0),
        }
    }
}

impl DetectorProfile {
    /// Detector that reproduces ground truth exactly with score `tp_mean`.
    pub fn noiseless() -> Self {
        DetectorProfile {
            loc_noise_rel: 0.0,
            miss_base: 0.0,
            miss_small_boost: 0.0,
            miss_fast_boost: 0.0,
            fp_rate: 0.0,
            score: ScoreModel {
                tp_mean: 0.9,
                tp_sigma: 0.0,
                fp_mean: 0.0,
                fp_sigma: 0.0,
            },
            ..DetectorProfile::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("miss_base", self.miss_base),
            ("miss_small_boost", self.miss_small_boost),
            ("miss_fast_boost", self.miss_fast_boost),
            ("score.tp_mean", self.score.tp_mean),
            ("score.fp_mean", self.score.fp_mean),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("detector {name} must be in [0, 1], got {p}")));
            }
        }
        let nonneg = [
            ("loc_noise_rel", self.loc_noise_rel),
            ("fp_rate", self.fp_rate),
            ("score.tp_sigma", self.score.tp_sigma),
            ("score.fp_sigma", self.score.fp_sigma),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("detector {name} must be >= 0, got {v}")));
            }
        }
        if !(self.latency_ms > 0.0) {
            return Err(Error::config("detector latency_ms must be > 0"));
        }
        if self.n_classes == 0 || !(self.fp_size.0 > 0.0 && self.fp_size.1 >= self.fp_size.0) {
            return Err(Error::config("detector n_classes/fp_size out of range"));
        }
        Ok(())
    }
}

fn frame_seed(seed: u64, frame: u32) -> u64 {
    // splitmix64 finalizer over (seed, frame)
    let mut z = seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn truncated(rng: &mut ChaCha8Rng, mean: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return mean.clamp(0.0, 1.0);
    }
    let n = Normal::new(mean, sigma).expect("finite sigma");
    for _ in 0..64 {
        let s = n.sample(rng);
        if (0.0..=1.0).contains(&s) {
            return s;
        }
    }
    mean.clamp(0.0, 1.0)
}

/// Simulated detections for one frame.
///
/// `motion_mag[i]` is the frame-to-frame IoU of `gt.boxes[i]` (1 = static).
/// The output depends only on `(profile.seed, frame_index)` and the inputs.
pub fn simulate_detection(
    gt: &GroundTruthFrame,
    profile: &DetectorProfile,
    frame_index: u32,
    motion_mag: &[f64],
    image_size: (u32, u32),
) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(profile.seed, frame_index));
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(gt.boxes.len());
    for (i, g) in gt.boxes.iter().enumerate() {
        let b = g.bbox;
        let mut p_miss = profile.miss_base;
        if b.area().sqrt() < profile.small_size {
            p_miss += profile.miss_small_boost;
        }
        if motion_mag.get(i).copied().unwrap_or(1.0) < profile.fast_iou {
            p_miss += profile.miss_fast_boost;
        }
        // draw every variate so one box's fate does not shift the others
        let u: f64 = rng.gen();
        let n: [f64; 4] = [
            std.sample(&mut rng),
            std.sample(&mut rng),
            std.sample(&mut rng),
            std.sample(&mut rng),
        ];
        let score = truncated(&mut rng, profile.score.tp_mean, profile.score.tp_sigma);
        if u < p_miss.clamp(0.0, 1.0) {
            continue;
        }
        let s = profile.loc_noise_rel;
        let jittered = BBox::new(
            b.x + s * b.w * n[0],
            b.y + s * b.h * n[1],
            b.w * (s * n[2]).exp(),
            b.h * (s * n[3]).exp(),
        );
        out.push(Detection::new(jittered, g.class_id, score));
    }

    if profile.fp_rate > 0.0 {
        let count = Poisson::new(profile.fp_rate)
            .map(|p| p.sample(&mut rng) as usize)
            .unwrap_or(0);
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        for _ in 0..count {
            let side_w = rng.gen_range(profile.fp_size.0..=profile.fp_size.1);
            let side_h = side_w * rng.gen_range(0.7..=1.4);
            let bx = BBox::new(
                rng.gen_range(0.0..w),
                rng.gen_range(0.0..h),
                side_w,
                side_h,
            );
            let class_id = rng.gen_range(0..profile.n_classes);
            let score = truncated(&mut rng, profile.score.fp_mean, profile.score.fp_sigma);
            out.push(Detection::new(bx, class_id, score));
        }
    }
    out
}

/// Source of image-based detections on demand.
pub trait Detector: Sync {
    fn detect(&self, frame: u32) -> Result<Vec<Detection>>;
    fn latency_ms(&self) -> f64;
}

/// [`simulate_detection`] over a rendered video's ground truth.
pub struct SimulatedDetector<'a> {
    video: &'a RenderedVideo,
    profile: DetectorProfile,
}

impl<'a> SimulatedDetector<'a> {
    pub fn new(video: &'a RenderedVideo, profile: DetectorProfile) -> Self {
        SimulatedDetector { video, profile }
    }

    pub fn profile(&self) -> &DetectorProfile {
        &self.profile
    }

    /// Per-box IoU with the same object in the following frame (or the
    /// preceding one at the end of the video).
    fn motion_of(&self, frame: u32) -> Vec<f64> {
        let gt = &self.video.gt;
        let cur = &gt[frame as usize];
        let other = if (frame as usize) + 1 < gt.len() {
            &gt[frame as usize + 1]
        } else if frame > 0 {
            &gt[frame as usize - 1]
        } else {
            cur
        };
        cur.boxes
            .iter()
            .map(|b| other.find(b.object_id).map_or(1.0, |o| iou(&b.bbox, &o.bbox)))
            .collect()
    }
}

impl Detector for SimulatedDetector<'_> {
    fn detect(&self, frame: u32) -> Result<Vec<Detection>> {
        let gt = self.video.gt.get(frame as usize).ok_or_else(|| {
            Error::invalid(format!("frame {frame} outside video of {}", self.video.gt.len()))
        })?;
        let motion = self.motion_of(frame);
        Ok(simulate_detection(
            gt,
            &self.profile,
            frame,
            &motion,
            (self.video.width(), self.video.height()),
        ))
    }

    fn latency_ms(&self) -> f64 {
        self.profile.latency_ms
    }
}
