//! Bundled procedural scenarios. Every preset is a pure function of its seed.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{render_video, DetectorProfile, Keypoint, RenderedVideo, Shape, TrajectoryScript};
use crate::error::{Error, Result};
use crate::geom::{iou, BBox};

fn default_background() -> u8 {
    40
}

/// Scene description: video geometry, scripted objects and the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub n_frames: u32,
    #[serde(default = "default_background")]
    pub background: u8,
    #[serde(default)]
    pub detector: DetectorProfile,
    #[serde(default)]
    pub scripts: Vec<TrajectoryScript>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.n_frames == 0 {
            return Err(Error::config(format!(
                "scenario '{}' has zero dimensions ({}x{}, {} frames)",
                self.name, self.width, self.height, self.n_frames
            )));
        }
        self.detector.validate()?;
        for s in &self.scripts {
            s.validate()
                .map_err(|e| Error::config(format!("scenario '{}': {e}", self.name)))?;
        }
        Ok(())
    }

    pub fn render(&self) -> Result<RenderedVideo> {
        self.validate()?;
        render_video(
            &self.scripts,
            self.width,
            self.height,
            self.n_frames,
            self.background,
        )
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("scenario", e))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("scenario", e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

pub const PRESET_NAMES: [&str; 7] = [
    "static",
    "slow",
    "fast",
    "fastsmall",
    "mixed",
    "noisy",
    "train",
];

/// Default clip length: divisible by 2, 4, 8, 12, 16 and 24, plus one.
pub const DEFAULT_FRAMES: u32 = 193;
/// Frames between trajectory knots. Divides 24 and is a multiple of 6, so
/// every knot lands on a lattice node at key frame interval 24.
const KNOT_SPACING: u32 = 12;
const MAX_REDRAWS: usize = 200;
const WIDTH: u32 = 320;
const HEIGHT: u32 = 240;

/// How fast an object moves, in box widths per frame, as a function of time.
#[derive(Clone, Copy)]
enum Pace {
    Constant(f64),
    /// Alternates `calm` and `busy` every `period` frames, starting calm.
    Phased { calm: f64, busy: f64, period: u32 },
}

impl Pace {
    fn at(&self, frame: u32) -> f64 {
        match *self {
            Pace::Constant(v) => v,
            Pace::Phased { calm, busy, period } => {
                if (frame / period) % 2 == 0 {
                    calm
                } else {
                    busy
                }
            }
        }
    }
}

struct ObjectPlan {
    side: f64,
    aspect: f64,
    pace: Pace,
    class_id: u32,
}

/// Reflects `p` into `[lo, hi]`, flipping `dir` on each bounce.
fn bounce(mut p: f64, lo: f64, hi: f64, dir: &mut f64) -> f64 {
    for _ in 0..8 {
        if p < lo {
            p = 2.0 * lo - p;
            *dir = -*dir;
        } else if p > hi {
            p = 2.0 * hi - p;
            *dir = -*dir;
        } else {
            break;
        }
    }
    p.clamp(lo, hi)
}

fn walker(
    rng: &mut ChaCha8Rng,
    object_id: u32,
    plan: &ObjectPlan,
    start: (f64, f64),
    n_frames: u32,
    segment: u32,
) -> TrajectoryScript {
    let turn = Normal::new(0.0, 0.5).expect("finite");
    let drift = Normal::new(0.0, 0.02).expect("finite");
    let w0 = plan.side * plan.aspect.sqrt();
    let h0 = plan.side / plan.aspect.sqrt();
    let (mut x, mut y) = start;
    let (mut w, mut h) = (w0, h0);
    let mut angle = rng.gen_range(0.0..2.0 * PI);
    let mut keypoints = vec![Keypoint {
        frame: 0,
        bbox: BBox::new(x, y, w, h),
    }];
    let mut t = 0;
    while t + 1 < n_frames {
        let len = segment.min(n_frames - 1 - t);
        let speed = plan.pace.at(t) * w;
        let (mut dx, mut dy) = (angle.cos(), angle.sin());
        x = bounce(x + dx * speed * len as f64, w / 2.0, WIDTH as f64 - w / 2.0, &mut dx);
        y = bounce(y + dy * speed * len as f64, h / 2.0, HEIGHT as f64 - h / 2.0, &mut dy);
        angle = dy.atan2(dx) + turn.sample(rng);
        let g: f64 = drift.sample(rng);
        w = (w * g.exp()).clamp(0.8 * w0, 1.25 * w0);
        h = (h * g.exp()).clamp(0.8 * h0, 1.25 * h0);
        t += len;
        keypoints.push(Keypoint {
            frame: t,
            bbox: BBox::new(x, y, w, h),
        });
    }
    TrajectoryScript {
        object_id,
        class_id: plan.class_id,
        keypoints,
        intensity: rng.gen_range(130..=230),
        shape: if rng.gen_bool(0.3) {
            Shape::Ellipse
        } else {
            Shape::Rect
        },
    }
}

/// Start positions on a jittered grid so objects begin apart.
fn starts(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
    let cols = 3usize;
    let rows = n.div_ceil(cols).max(1);
    let mut cells: Vec<usize> = (0..rows * cols).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.gen_range(0..=i));
    }
    cells
        .into_iter()
        .take(n)
        .map(|c| {
            let cw = WIDTH as f64 / cols as f64;
            let ch = HEIGHT as f64 / rows as f64;
            let cx = (c % cols) as f64 * cw + cw / 2.0 + rng.gen_range(-0.15..0.15) * cw;
            let cy = (c / cols) as f64 * ch + ch / 2.0 + rng.gen_range(-0.15..0.15) * ch;
            (cx, cy)
        })
        .collect()
}

/// Largest IoU two objects of the same class may reach in a bundled preset.
/// Per-class suppression cannot tell such objects apart.
const SAME_CLASS_MAX_IOU: f64 = 0.3;

fn same_class_overlap(scripts: &[TrajectoryScript], n_frames: u32) -> bool {
    (0..n_frames).any(|t| {
        scripts.iter().enumerate().any(|(i, a)| {
            scripts[i + 1..]
                .iter()
                .any(|b| a.class_id == b.class_id && iou(&a.box_at(t), &b.box_at(t)) > SAME_CLASS_MAX_IOU)
        })
    })
}

fn assemble(
    name: &str,
    seed: u64,
    rng: &mut ChaCha8Rng,
    plans: Vec<ObjectPlan>,
    n_frames: u32,
    detector: DetectorProfile,
) -> Scenario {
    let draw = |rng: &mut ChaCha8Rng| -> Vec<TrajectoryScript> {
        let pos = starts(rng, plans.len());
        plans
            .iter()
            .zip(pos)
            .enumerate()
            .map(|(i, (plan, p))| walker(rng, i as u32 + 1, plan, p, n_frames, KNOT_SPACING))
            .collect()
    };
    // redraw until same-class objects stay apart; keep the last draw otherwise
    let mut scripts = draw(rng);
    for _ in 0..MAX_REDRAWS {
        if !same_class_overlap(&scripts, n_frames) {
            break;
        }
        scripts = draw(rng);
    }
    Scenario {
        name: name.to_string(),
        width: WIDTH,
        height: HEIGHT,
        n_frames,
        background: default_background(),
        detector: DetectorProfile { seed, ..detector },
        scripts,
    }
}

/// Builds a bundled scenario. Unknown names are a config error.
pub fn preset(name: &str, seed: u64) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_4c41_5454_4943);
    let classes = 3;
    let plan = |side: (f64, f64), pace: Pace, rng: &mut ChaCha8Rng, i: usize| ObjectPlan {
        side: rng.gen_range(side.0..=side.1),
        aspect: rng.gen_range(0.75..=1.33),
        pace,
        class_id: (i % classes) as u32,
    };
    let base = DetectorProfile::default();
    let scenario = match name {
        "static" => {
            let plans = (0..4)
                .map(|i| plan((24.0, 44.0), Pace::Constant(0.0), &mut rng, i))
                .collect();
            assemble(name, seed, &mut rng, plans, DEFAULT_FRAMES, base)
        }
        "slow" => {
            let plans = (0..4)
                .map(|i| {
                    let v = rng.gen_range(0.005..0.02);
                    plan((28.0, 48.0), Pace::Constant(v), &mut rng, i)
                })
                .collect();
            assemble(name, seed, &mut rng, plans, DEFAULT_FRAMES, base)
        }
        "fast" => {
            let plans = (0..6)
                .map(|i| {
                    let v = if i < 2 {
                        rng.gen_range(0.0..0.003)
                    } else {
                        rng.gen_range(0.06..0.14)
                    };
                    plan((24.0, 40.0), Pace::Constant(v), &mut rng, i)
                })
                .collect();
            assemble(name, seed, &mut rng, plans, DEFAULT_FRAMES, base)
        }
        "fastsmall" => {
            let plans = (0..5)
                .map(|i| {
                    let v = rng.gen_range(0.06..0.12);
                    plan((14.0, 22.0), Pace::Constant(v), &mut rng, i)
                })
                .collect();
            assemble(name, seed, &mut rng, plans, DEFAULT_FRAMES, base)
        }
        "mixed" => {
            let plans = (0..5)
                .map(|i| {
                    let pace = Pace::Phased {
                        calm: rng.gen_range(0.0..0.01),
                        busy: rng.gen_range(0.08..0.14),
                        period: 48,
                    };
                    plan((18.0, 36.0), pace, &mut rng, i)
                })
                .collect();
            assemble(name, seed, &mut rng, plans, DEFAULT_FRAMES, base)
        }
        "noisy" => {
            let plans = (0..5)
                .map(|i| {
                    let v = rng.gen_range(0.0..0.04);
                    plan((22.0, 44.0), Pace::Constant(v), &mut rng, i)
                })
                .collect();
            let det = DetectorProfile {
                loc_noise_rel: 0.08,
                miss_base: 0.1,
                fp_rate: 1.5,
                score: super::ScoreModel {
                    tp_mean: 0.75,
                    tp_sigma: 0.15,
                    fp_mean: 0.5,
                    fp_sigma: 0.2,
                },
                ..base
            };
            assemble(name, seed, &mut rng, plans, DEFAULT_FRAMES, det)
        }
        "train" => {
            let plans = (0..6)
                .map(|i| {
                    // every third object (nearly) still, so static scenes are covered
                    let v = if i % 3 == 0 {
                        rng.gen_range(0.0..0.005)
                    } else {
                        rng.gen_range(0.0..0.15)
                    };
                    plan((16.0, 48.0), Pace::Constant(v), &mut rng, i)
                })
                .collect();
            assemble(name, seed, &mut rng, plans, 121, base)
        }
        other => {
            return Err(Error::config(format!(
                "unknown scenario preset '{other}' (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_deterministic_and_valid() {
        for name in PRESET_NAMES {
            let a = preset(name, 3).unwrap();
            let b = preset(name, 3).unwrap();
            assert_eq!(a, b);
            a.validate().unwrap();
            assert_ne!(a, preset(name, 4).unwrap());
        }
        assert!(preset("nope", 0).is_err());
    }

    #[test]
    fn scenario_toml_roundtrip() {
        let s = preset("mixed", 1).unwrap();
        let text = s.to_toml().unwrap();
        assert_eq!(Scenario::from_toml(&text).unwrap(), s);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "name='x'\nwidth=8\nheight=8\nn_frames=2\nbogus=1\n";
        assert!(Scenario::from_toml(text).is_err());
    }

    #[test]
    fn same_class_objects_stay_apart() {
        for name in PRESET_NAMES {
            for seed in 0..5 {
                let s = preset(name, seed).unwrap();
                assert!(!same_class_overlap(&s.scripts, s.n_frames), "{name}/{seed}");
            }
        }
    }

    #[test]
    fn objects_stay_inside() {
        let s = preset("fast", 9).unwrap();
        for sc in &s.scripts {
            for k in &sc.keypoints {
                let (x0, y0, x1, y1) = k.bbox.corners();
                assert!(x0 >= -1e-9 && y0 >= -1e-9);
                assert!(x1 <= s.width as f64 + 1e-9 && y1 <= s.height as f64 + 1e-9);
            }
        }
    }
}
