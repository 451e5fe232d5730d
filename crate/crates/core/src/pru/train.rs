//! Training of the linear propagation/refinement pair on synthetic clips.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{smooth_l1, smooth_l1_grad};
use super::{motion_between, LinearRegressor, PropagationMethod, PruConfig, ScalePyramid};
use crate::error::{Error, Result};
use crate::geom::{decode_delta, encode_delta, iou, BBox, BoxDelta};
use crate::motion::{appearance_features, roi_motion_features, FEATURE_LEN};
use crate::synth::{Detector, Scenario, SimulatedDetector};

/// Unit variants compared in the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruVariant {
    /// Propagation regresses object movement, refinement the residual offset;
    /// trained jointly with the refinement loss flowing back into propagation.
    #[default]
    A,
    /// Propagation regresses the full offset from the source box to the target.
    B,
    /// Same structure as `A`, but the two regressors are fitted one after the
    /// other.
    C,
    /// One propagation step straight to the target, no refinement.
    D,
}

impl PruVariant {
    pub const ALL: [PruVariant; 4] = [PruVariant::A, PruVariant::B, PruVariant::C, PruVariant::D];

    pub fn name(self) -> &'static str {
        match self {
            PruVariant::A => "a",
            PruVariant::B => "b",
            PruVariant::C => "c",
            PruVariant::D => "d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown unit variant '{s}' (a, b, c, d)")))
    }

    pub fn has_refiner(self) -> bool {
        self != PruVariant::D
    }

    fn movement_target(self) -> bool {
        matches!(self, PruVariant::A | PruVariant::C)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: PruVariant,
    /// `mhi` or `rgbdiff`.
    pub method: PropagationMethod,
    pub epochs: usize,
    pub lr: f64,
    pub interval_min: u32,
    pub interval_max: u32,
    pub pairs_per_video: usize,
    pub seed: u64,
    /// Feature indices the regressors may use; empty means all.
    pub feature_subset: Vec<usize>,
    /// Epochs between recomputations of the refinement features.
    pub refresh_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: PruVariant::A,
            method: PropagationMethod::Mhi,
            epochs: 300,
            lr: 0.02,
            interval_min: 6,
            interval_max: 18,
            pairs_per_video: 40,
            seed: 0,
            feature_subset: Vec::new(),
            refresh_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == PropagationMethod::Interp {
            return Err(Error::config("interpolation has nothing to train"));
        }
        if self.interval_min == 0 || self.interval_min > self.interval_max {
            return Err(Error::config("training interval must satisfy 0 < min <= max"));
        }
        if self.epochs == 0 || !(self.lr > 0.0) || self.refresh_every == 0 {
            return Err(Error::config("epochs, lr and refresh_every must be positive"));
        }
        if let Some(&k) = self.feature_subset.iter().find(|&&k| k >= FEATURE_LEN) {
            return Err(Error::config(format!("feature index {k} out of range")));
        }
        Ok(())
    }

    fn mask(&self) -> [bool; FEATURE_LEN] {
        let mut m = [self.feature_subset.is_empty(); FEATURE_LEN];
        for &k in &self.feature_subset {
            m[k] = true;
        }
        m
    }
}

/// One detection carried from `t_start` to `t_end` at pyramid `level`.
/// Boxes are in that level's coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSample {
    pub video: usize,
    pub level: usize,
    pub t_end: u32,
    pub src: BBox,
    pub f_t: [f64; FEATURE_LEN],
    /// Movement of the matched object between the two frames.
    pub movement: BoxDelta,
    /// Offset from the source detection to the object at `t_end`.
    pub overall: BoxDelta,
    pub g_end: BBox,
}

pub struct TrainingSet {
    pub pyramids: Vec<ScalePyramid>,
    pub samples: Vec<TrainSample>,
}

fn video_seed(seed: u64, video: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (video as u64).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

impl TrainingSet {
    /// Samples frame pairs `tau` apart, with `tau` uniform in the configured
    /// interval, runs the simulated detector on the first frame and keeps
    /// every detection that overlaps an object (IoU >= 0.5) still present at
    /// the second frame.
    pub fn generate(scenarios: &[Scenario], cfg: &PruConfig, tc: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        tc.validate()?;
        if cfg.n_levels() < 2 {
            return Err(Error::config("training needs at least two scale levels"));
        }
        let samples_for = tc.method.motion_samples(cfg).expect("validated");
        let per_video: Vec<(ScalePyramid, Vec<TrainSample>)> = scenarios
            .par_iter()
            .enumerate()
            .map(|(vi, sc)| -> Result<_> {
                let video = sc.render()?;
                let pyr = ScalePyramid::build(&video.frames, &cfg.scale_levels);
                let mut profile = sc.detector.clone();
                profile.seed = video_seed(tc.seed, vi);
                let detector = SimulatedDetector::new(&video, profile);
                let mut rng = ChaCha8Rng::seed_from_u64(video_seed(tc.seed ^ 0xa5a5, vi));
                let n = video.n_frames();
                let mut out = Vec::new();
                for _ in 0..tc.pairs_per_video {
                    let level = rng.gen_range(0..cfg.n_levels() - 1);
                    let t0 = rng.gen_range(0..n);
                    let tau = rng.gen_range(tc.interval_min..=tc.interval_max);
                    let forward: bool = rng.gen();
                    let t1 = match (forward, t0.checked_sub(tau), t0 + tau < n) {
                        (true, _, true) | (false, None, true) => t0 + tau,
                        (_, Some(b), _) => b,
                        _ => continue,
                    };
                    let s = cfg.scale_levels[level];
                    let m = motion_between(&pyr, level, t0, t1, samples_for, cfg.mhi)?;
                    let (gt0, gt1) = (&video.gt[t0 as usize], &video.gt[t1 as usize]);
                    for d in detector.detect(t0)? {
                        let best = gt0
                            .boxes
                            .iter()
                            .filter(|g| g.class_id == d.class_id)
                            .map(|g| (iou(&g.bbox, &d.bbox), g))
                            .max_by(|a, b| a.0.total_cmp(&b.0));
                        let Some((o, g)) = best else { continue };
                        let Some(g_end) = gt1.find(g.object_id) else { continue };
                        if o < 0.5 {
                            continue;
                        }
                        let src = d.bbox.scaled(s);
                        let f = roi_motion_features(&m, &src, cfg.propagation_expand);
                        if f.degenerate {
                            continue;
                        }
                        let g_start = g.bbox.scaled(s);
                        let g_end = g_end.bbox.scaled(s);
                        out.push(TrainSample {
                            video: vi,
                            level,
                            t_end: t1,
                            src,
                            f_t: f.values,
                            movement: encode_delta(&g_start, &g_end),
                            overall: encode_delta(&src, &g_end),
                            g_end,
                        });
                    }
                }
                Ok((pyr, out))
            })
            .collect::<Result<_>>()?;
        let mut pyramids = Vec::with_capacity(per_video.len());
        let mut samples = Vec::new();
        for (p, s) in per_video {
            pyramids.push(p);
            samples.extend(s);
        }
        if samples.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        Ok(TrainingSet { pyramids, samples })
    }

    /// Appearance features one level up for boxes at each sample's level.
    pub fn refine_features(&self, cfg: &PruConfig, boxes: &[BBox]) -> Vec<[f64; FEATURE_LEN]> {
        self.samples
            .par_iter()
            .zip(boxes)
            .map(|(s, b)| {
                let up = cfg.scale_levels[s.level + 1] / cfg.scale_levels[s.level];
                let frame = self.pyramids[s.video].frame(s.level + 1, s.t_end);
                appearance_features(frame, &b.scaled(up), cfg.refine_expand).values
            })
            .collect()
    }
}

/// Per-feature affine normalization; masked or constant features map to 0.
#[derive(Debug, Clone, Copy)]
struct Standardizer {
    mean: [f64; FEATURE_LEN],
    inv_sd: [f64; FEATURE_LEN],
}

impl Standardizer {
    fn fit(rows: &[[f64; FEATURE_LEN]], mask: &[bool; FEATURE_LEN]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = [0.0; FEATURE_LEN];
        let mut inv_sd = [0.0; FEATURE_LEN];
        for k in 0..FEATURE_LEN {
            if !mask[k] {
                continue;
            }
            let mu = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mu).powi(2)).sum::<f64>() / n;
            mean[k] = mu;
            if var > 1e-18 {
                inv_sd[k] = 1.0 / var.sqrt();
            }
        }
        Standardizer { mean, inv_sd }
    }

    fn apply(&self, rows: &[[f64; FEATURE_LEN]]) -> Vec<[f64; FEATURE_LEN]> {
        rows.iter()
            .map(|r| std::array::from_fn(|k| (r[k] - self.mean[k]) * self.inv_sd[k]))
            .collect()
    }

    /// Raw-feature regressor equivalent to `block` over standardized ones.
    fn fold(&self, block: &[f64]) -> LinearRegressor {
        let mut reg = LinearRegressor::zeros();
        for c in 0..4 {
            let mut b = block[4 * FEATURE_LEN + c];
            for k in 0..FEATURE_LEN {
                let w = block[c * FEATURE_LEN + k] * self.inv_sd[k];
                reg.weights[c][k] = w;
                b -= w * self.mean[k];
            }
            reg.bias[c] = b;
        }
        reg
    }
}

/// Parameters of one linear branch: `4 x FEATURE_LEN` weights, then 4 biases.
pub const BLOCK_LEN: usize = 4 * FEATURE_LEN + 4;

fn affine(block: &[f64], f: &[f64; FEATURE_LEN]) -> [f64; 4] {
    std::array::from_fn(|c| {
        block[4 * FEATURE_LEN + c]
            + (0..FEATURE_LEN)
                .map(|k| block[c * FEATURE_LEN + k] * f[k])
                .sum::<f64>()
    })
}

fn accumulate(grad: &mut [f64], f: &[f64; FEATURE_LEN], dp: &[f64; 4]) {
    for c in 0..4 {
        for k in 0..FEATURE_LEN {
            grad[c * FEATURE_LEN + k] += dp[c] * f[k];
        }
        grad[4 * FEATURE_LEN + c] += dp[c];
    }
}

/// Inputs of the two-branch objective. `f_s` is treated as a constant; leave
/// it empty to evaluate the propagation branch alone.
pub struct JointBatch<'a> {
    pub src: &'a [BBox],
    pub f_t: &'a [[f64; FEATURE_LEN]],
    pub target_t: &'a [BoxDelta],
    pub f_s: &'a [[f64; FEATURE_LEN]],
    pub g_end: &'a [BBox],
}

/// Joint loss and its gradient with respect to `params` (two blocks of
/// [`BLOCK_LEN`]: propagation, then refinement).
///
/// The propagation branch predicts `p_t`, giving `box_t = decode(src, p_t)`.
/// The refinement branch predicts `p_s` against `encode(box_t, g_end)`, so
/// its loss also depends on `p_t`. With `couple` set that dependence is
/// differentiated; otherwise the refinement target counts as a constant.
pub fn joint_objective(
    params: &[f64],
    batch: &JointBatch,
    lambda: f64,
    beta: f64,
    couple: bool,
) -> (f64, Vec<f64>) {
    assert_eq!(params.len(), 2 * BLOCK_LEN, "parameter vector length");
    let n = batch.src.len();
    let with_s = !batch.f_s.is_empty() && lambda != 0.0;
    let (wt, ws) = params.split_at(BLOCK_LEN);
    let mut grad = vec![0.0; 2 * BLOCK_LEN];
    let mut loss = 0.0;
    let scale = 1.0 / (4.0 * n as f64);
    for i in 0..n {
        let p = affine(wt, &batch.f_t[i]);
        let t = batch.target_t[i].to_array();
        let mut dp = [0.0; 4];
        for c in 0..4 {
            loss += smooth_l1(p[c] - t[c], beta) * scale;
            dp[c] = smooth_l1_grad(p[c] - t[c], beta) * scale;
        }
        if with_s {
            let box_t = decode_delta(&batch.src[i], &BoxDelta::from_array(p));
            let ts = encode_delta(&box_t, &batch.g_end[i]).to_array();
            let ps = affine(ws, &batch.f_s[i]);
            let mut dps = [0.0; 4];
            for c in 0..4 {
                loss += lambda * smooth_l1(ps[c] - ts[c], beta) * scale;
                dps[c] = lambda * smooth_l1_grad(ps[c] - ts[c], beta) * scale;
            }
            accumulate(&mut grad[BLOCK_LEN..], &batch.f_s[i], &dps);
            if couple {
                // d ts / d p: ts0 = (gx - sx - p0 sw) / (sw e^p2), ts2 = ln(gw/sw) - p2
                let dts = [-dps[0], -dps[1], -dps[2], -dps[3]];
                dp[0] += dts[0] * -(-p[2]).exp();
                dp[1] += dts[1] * -(-p[3]).exp();
                dp[2] += dts[0] * -ts[0] + dts[2] * -1.0;
                dp[3] += dts[1] * -ts[1] + dts[3] * -1.0;
            }
        }
        accumulate(&mut grad[..BLOCK_LEN], &batch.f_t[i], &dp);
    }
    (loss, grad)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    lr: f64,
}

impl Adam {
    fn new(len: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], frozen: std::ops::Range<usize>) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for i in 0..params.len() {
            if frozen.contains(&i) {
                continue;
            }
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPru {
    pub variant: PruVariant,
    pub method: PropagationMethod,
    pub reg_t: LinearRegressor,
    pub reg_s: Option<LinearRegressor>,
    /// Training loss before each update.
    pub loss_curve: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    variant: PruVariant,
    method: PropagationMethod,
    loss_curve: Vec<f64>,
}

impl TrainedPru {
    /// Writes `reg_t.json`, `reg_s.json` (when present) and `meta.json`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.reg_t.save(dir.join("reg_t.json"))?;
        if let Some(s) = &self.reg_s {
            s.save(dir.join("reg_s.json"))?;
        }
        let meta = Manifest {
            variant: self.variant,
            method: self.method,
            loss_curve: self.loss_curve.clone(),
        };
        let path = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&meta).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse("meta.json", e))?;
        let reg_s = if meta.variant.has_refiner() {
            Some(LinearRegressor::load(dir.join("reg_s.json"))?)
        } else {
            None
        };
        Ok(TrainedPru {
            variant: meta.variant,
            method: meta.method,
            reg_t: LinearRegressor::load(dir.join("reg_t.json"))?,
            reg_s,
            loss_curve: meta.loss_curve,
        })
    }
}

fn check_finite(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, loss })
    }
}

/// Fits the propagation (and, except for variant `D`, refinement) regressor
/// by full-batch Adam on the joint loss.
pub fn train_regressors(set: &TrainingSet, cfg: &PruConfig, tc: &TrainConfig) -> Result<TrainedPru> {
    cfg.validate()?;
    tc.validate()?;
    let mask = tc.mask();
    let samples = &set.samples;
    let src: Vec<BBox> = samples.iter().map(|s| s.src).collect();
    let g_end: Vec<BBox> = samples.iter().map(|s| s.g_end).collect();
    let raw_t: Vec<[f64; FEATURE_LEN]> = samples.iter().map(|s| s.f_t).collect();
    let target_t: Vec<BoxDelta> = samples
        .iter()
        .map(|s| {
            if tc.variant.movement_target() {
                s.movement
            } else {
                s.overall
            }
        })
        .collect();
    let std_t = Standardizer::fit(&raw_t, &mask);
    let f_t = std_t.apply(&raw_t);

    let mut params = vec![0.0; 2 * BLOCK_LEN];
    let mut curve = Vec::with_capacity(tc.epochs * 2);
    let (lambda, beta) = (cfg.lambda, cfg.smooth_l1_beta);

    let t_boxes = |params: &[f64]| -> Vec<BBox> {
        src.iter()
            .zip(&f_t)
            .map(|(s, f)| decode_delta(s, &BoxDelta::from_array(affine(&params[..BLOCK_LEN], f))))
            .collect()
    };
    // While the refinement weights are still zero its prediction is zero
    // whatever the features, so the reported loss already includes that
    // branch when there is one.
    let blank_s = vec![[0.0; FEATURE_LEN]; src.len()];
    let t_only = |params: &mut Vec<f64>, curve: &mut Vec<f64>| -> Result<()> {
        let mut adam = Adam::new(params.len(), tc.lr);
        let batch = JointBatch {
            src: &src,
            f_t: &f_t,
            target_t: &target_t,
            f_s: if tc.variant.has_refiner() { &blank_s } else { &[] },
            g_end: &g_end,
        };
        for epoch in 0..tc.epochs {
            let (loss, grad) = joint_objective(params, &batch, lambda, beta, false);
            check_finite(epoch, loss)?;
            curve.push(loss);
            adam.update(params, &grad, BLOCK_LEN..2 * BLOCK_LEN);
        }
        Ok(())
    };

    let std_s = match tc.variant {
        PruVariant::D => {
            t_only(&mut params, &mut curve)?;
            None
        }
        PruVariant::C => {
            t_only(&mut params, &mut curve)?;
            let raw_s = set.refine_features(cfg, &t_boxes(&params));
            let std_s = Standardizer::fit(&raw_s, &mask);
            let f_s = std_s.apply(&raw_s);
            let batch = JointBatch {
                src: &src,
                f_t: &f_t,
                target_t: &target_t,
                f_s: &f_s,
                g_end: &g_end,
            };
            let mut adam = Adam::new(params.len(), tc.lr);
            for epoch in 0..tc.epochs {
                let (loss, grad) = joint_objective(&params, &batch, lambda, beta, false);
                check_finite(tc.epochs + epoch, loss)?;
                curve.push(loss);
                adam.update(&mut params, &grad, 0..BLOCK_LEN);
            }
            Some(std_s)
        }
        PruVariant::A | PruVariant::B => {
            let raw0 = set.refine_features(cfg, &src);
            let std_s = Standardizer::fit(&raw0, &mask);
            let mut f_s = std_s.apply(&raw0);
            let mut adam = Adam::new(params.len(), tc.lr);
            for epoch in 0..tc.epochs {
                if epoch > 0 && epoch % tc.refresh_every == 0 {
                    f_s = std_s.apply(&set.refine_features(cfg, &t_boxes(&params)));
                }
                let batch = JointBatch {
                    src: &src,
                    f_t: &f_t,
                    target_t: &target_t,
                    f_s: &f_s,
                    g_end: &g_end,
                };
                let (loss, grad) = joint_objective(&params, &batch, lambda, beta, true);
                check_finite(epoch, loss)?;
                curve.push(loss);
                adam.update(&mut params, &grad, 0..0);
            }
            Some(std_s)
        }
    };

    Ok(TrainedPru {
        variant: tc.variant,
        method: tc.method,
        reg_t: std_t.fold(&params[..BLOCK_LEN]),
        reg_s: std_s.map(|s| s.fold(&params[BLOCK_LEN..])),
        loss_curve: curve,
    })
}
