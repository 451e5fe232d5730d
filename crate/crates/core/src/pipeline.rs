//! One end-to-end run on a rendered video: key frames, lattice execution,
//! optional tube rescoring, evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, mean_average_precision, EvalConfig, EvalResult};
use crate::geom::Detection;
use crate::lattice::{
    detect_keyframes, execute, insertion_threshold, pair_easiness, plan_paths, select_adaptive, select_uniform,
    CostModel, EasinessParams, ExecContext, Execution, KeyframeSelection, PlannedPaths,
};
use crate::pru::{rescale, PropagationMethod, PruConfig, Regressor, ScalePyramid, UnitMode};
use crate::synth::{Detector, RenderedVideo};
use crate::tube::{build_tubes, rescore_dense, RescoreConfig, Tube, TubeClassifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyframeStrategy {
    Uniform,
    Adaptive,
}

impl KeyframeStrategy {
    pub const ALL: [KeyframeStrategy; 2] = [KeyframeStrategy::Uniform, KeyframeStrategy::Adaptive];

    pub fn name(self) -> &'static str {
        match self {
            KeyframeStrategy::Uniform => "uniform",
            KeyframeStrategy::Adaptive => "adaptive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown key frame strategy '{s}' (uniform, adaptive)")))
    }
}

/// Everything about a run except the learned or simulated components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeSettings {
    pub strategy: KeyframeStrategy,
    /// Key frame interval; the coarse interval for adaptive selection.
    pub interval: u32,
    /// Adaptive insertion threshold; calibrated when absent.
    pub easiness_thresh: Option<f64>,
    /// Quantile of calibration easiness used as threshold.
    pub easiness_quantile: f64,
    pub easiness: EasinessParams,
    pub max_stages: u32,
    pub propagator: PropagationMethod,
    /// Pair interpolation endpoints by shared provenance before IoU.
    pub linked_interpolation: bool,
    pub costs: CostModel,
    pub rescore: RescoreConfig,
    pub eval: EvalConfig,
}

impl Default for LatticeSettings {
    fn default() -> Self {
        LatticeSettings {
            strategy: KeyframeStrategy::Uniform,
            interval: 24,
            easiness_thresh: None,
            easiness_quantile: 0.25,
            easiness: EasinessParams::default(),
            max_stages: 2,
            propagator: PropagationMethod::Mhi,
            linked_interpolation: true,
            costs: CostModel::default(),
            rescore: RescoreConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl LatticeSettings {
    pub fn validate(&self, pru: &PruConfig) -> Result<()> {
        pru.validate()?;
        self.costs.validate()?;
        self.eval.validate()?;
        if self.interval == 0 {
            return Err(Error::config("interval must be at least 1"));
        }
        if self.strategy == KeyframeStrategy::Adaptive && self.interval < 2 {
            return Err(Error::config("adaptive key frames need an interval of at least 2"));
        }
        if !(0.0..=1.0).contains(&self.easiness_quantile) {
            return Err(Error::config("easiness_quantile must lie in [0, 1]"));
        }
        if let Some(t) = self.easiness_thresh {
            if t.is_nan() {
                return Err(Error::config("easiness_thresh is NaN"));
            }
        }
        if self.max_stages as usize >= pru.n_levels() {
            return Err(Error::config(format!(
                "max_stages {} needs {} scale levels, {} configured",
                self.max_stages,
                self.max_stages + 1,
                pru.n_levels()
            )));
        }
        if self.rescore.samples == 0 {
            return Err(Error::config("rescore.samples must be at least 1"));
        }
        Ok(())
    }

    /// Stages actually planned: none for pure interpolation.
    pub fn stages(&self) -> u32 {
        if self.propagator == PropagationMethod::Interp {
            0
        } else {
            self.max_stages
        }
    }
}

/// Easiness threshold flagging the coarse pairs of a calibration video at or
/// below the `quantile` of their easiness.
pub fn calibrate_easiness(
    det: &dyn Detector,
    n_frames: u32,
    interval: u32,
    params: EasinessParams,
    quantile: f64,
) -> Result<f64> {
    insertion_threshold(&pair_easiness(det, n_frames, interval, params)?, quantile)
}

pub fn select_keyframes(det: &dyn Detector, n_frames: u32, s: &LatticeSettings) -> Result<KeyframeSelection> {
    match s.strategy {
        KeyframeStrategy::Uniform => detect_keyframes(det, &select_uniform(n_frames, s.interval)?),
        KeyframeStrategy::Adaptive => {
            let thresh = s
                .easiness_thresh
                .ok_or_else(|| Error::config("adaptive key frames need an easiness threshold"))?;
            select_adaptive(det, n_frames, s.interval, thresh, s.easiness)
        }
    }
}

/// Propagation and refinement regressors, unit mode and optional tube classifier.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub reg_t: &'a dyn Regressor,
    pub reg_s: &'a dyn Regressor,
    pub mode: UnitMode,
    pub classifier: Option<&'a dyn TubeClassifier>,
}

#[derive(Debug, Clone)]
pub struct Rescored {
    pub before: Vec<Tube>,
    pub after: Vec<Tube>,
    /// Evaluation of the lattice output before rescoring.
    pub eval_before: EvalResult,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub selection: KeyframeSelection,
    pub plan: PlannedPaths,
    pub exec: Execution,
    /// Final per-frame detections (rescored when a classifier is given).
    pub dets: Vec<Vec<Detection>>,
    pub rescored: Option<Rescored>,
    pub eval: EvalResult,
}

/// Executes a lattice from already selected key frames.
pub fn run_with_selection(
    video: &RenderedVideo,
    pyramid: &ScalePyramid,
    pru: &PruConfig,
    s: &LatticeSettings,
    comps: Components,
    selection: KeyframeSelection,
) -> Result<RunOutput> {
    s.validate(pru)?;
    let plan = plan_paths(&selection.keyframes, s.stages())?;
    let ctx = ExecContext {
        pyramid,
        cfg: pru,
        method: s.propagator,
        mode: comps.mode,
        reg_t: comps.reg_t,
        reg_s: comps.reg_s,
        costs: s.costs,
        linked_interpolation: s.linked_interpolation,
    };
    let exec = execute(&ctx, &selection.dets, &plan)?;
    let eval_raw = evaluate(&exec.dense, &video.gt, exec.total_cost_ms, &s.eval)?;
    let (dets, rescored, eval) = match comps.classifier {
        None => (exec.dense.clone(), None, eval_raw),
        Some(cls) => {
            let before = build_tubes(&exec);
            let (after, dets) = rescore_dense(&exec.dense, &before, cls, &video.frames, &s.rescore)?;
            let eval = evaluate(&dets, &video.gt, exec.total_cost_ms, &s.eval)?;
            let r = Rescored {
                before,
                after,
                eval_before: eval_raw,
            };
            (dets, Some(r), eval)
        }
    };
    Ok(RunOutput {
        selection,
        plan,
        exec,
        dets,
        rescored,
        eval,
    })
}

/// Selects key frames with `det`, then [`run_with_selection`].
pub fn run(
    video: &RenderedVideo,
    pyramid: &ScalePyramid,
    det: &dyn Detector,
    pru: &PruConfig,
    s: &LatticeSettings,
    comps: Components,
) -> Result<RunOutput> {
    s.validate(pru)?;
    let selection = select_keyframes(det, video.n_frames(), s)?;
    run_with_selection(video, pyramid, pru, s, comps, selection)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub time: u32,
    pub level: u8,
    pub n_dets: usize,
    /// mAP of the node's boxes (mapped to native size) against its frame;
    /// `None` when the frame has no ground truth.
    pub map: Option<f64>,
}

/// Scores every lattice node on its own frame.
pub fn per_node_map(exec: &Execution, video: &RenderedVideo, pru: &PruConfig, iou_thresh: f64) -> Result<Vec<NodeScore>> {
    exec.graph
        .nodes
        .values()
        .map(|n| {
            let t = n.pos.time as usize;
            let gt = video
                .gt
                .get(t)
                .ok_or_else(|| Error::invalid(format!("node at frame {t} outside the video")))?;
            let native = rescale(&n.dets, pru.scale_levels[n.pos.level as usize], 1.0);
            let (map, _) = mean_average_precision(&[native], std::slice::from_ref(gt), iou_thresh)?;
            Ok(NodeScore {
                time: n.pos.time,
                level: n.pos.level,
                n_dets: n.dets.len(),
                map,
            })
        })
        .collect()
}
