use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{calibrate_easiness, run, Components, KeyframeStrategy, LatticeSettings};
use crate::pru::{PropagationMethod, PruConfig, Regressor, ScalePyramid, UnitMode};
use crate::synth::{RenderedVideo, Scenario, SimulatedDetector};

/// Column names of [`SweepRow`] in CSV order.
pub const SWEEP_HEADER: &str =
    "interval,strategy,propagator,seeds,map,recall,map_slow,map_medium,map_fast,cost_ms,fps,keyframes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub interval: u32,
    pub strategy: KeyframeStrategy,
    pub propagator: PropagationMethod,
    pub seeds: usize,
    pub map: f64,
    pub recall: f64,
    /// Bucket means over the seeds where the bucket is non-empty.
    pub map_slow: Option<f64>,
    pub map_medium: Option<f64>,
    pub map_fast: Option<f64>,
    pub cost_ms: f64,
    pub fps: f64,
    /// Mean detector invocations per video.
    pub keyframes: f64,
}

impl SweepRow {
    pub fn key(&self) -> (u32, KeyframeStrategy, PropagationMethod) {
        (self.interval, self.strategy, self.propagator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    pub intervals: Vec<u32>,
    pub strategies: Vec<KeyframeStrategy>,
    pub propagators: Vec<PropagationMethod>,
    pub seeds: Vec<u64>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        SweepAxes {
            intervals: vec![2, 4, 8, 12, 16, 24],
            strategies: vec![KeyframeStrategy::Uniform, KeyframeStrategy::Adaptive],
            propagators: PropagationMethod::ALL.to_vec(),
            seeds: (0..5).collect(),
        }
    }
}

impl SweepAxes {
    pub fn validate(&self) -> Result<()> {
        if self.intervals.is_empty() || self.strategies.is_empty() || self.propagators.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("every sweep axis needs at least one value"));
        }
        Ok(())
    }

    /// Cells in output order: interval, then strategy, then propagator.
    pub fn cells(&self) -> Vec<(u32, KeyframeStrategy, PropagationMethod)> {
        let mut out = Vec::new();
        for &i in &self.intervals {
            for &s in &self.strategies {
                for &p in &self.propagators {
                    out.push((i, s, p));
                }
            }
        }
        out
    }
}

pub type RegressorPair = (Arc<dyn Regressor>, Arc<dyn Regressor>);

/// Supplies propagation/refinement regressors for a method on a video.
pub type ModelSource<'a> = dyn Fn(PropagationMethod, &RenderedVideo) -> Result<RegressorPair> + Sync + 'a;

fn mean(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = v.fold((0.0, 0), |(s, n), x| (s + x, n + 1));
    (if n == 0 { 0.0 } else { s / n as f64 }, n)
}

/// Full-factorial sweep. `scenario(seed)` builds the video for a seed and
/// `calibration` (used only for adaptive cells without a fixed threshold)
/// the video the easiness threshold is calibrated on, per interval. Cells
/// listed in `skip` are not run.
pub fn sweep(
    scenario: &(dyn Fn(u64) -> Result<Scenario> + Sync),
    calibration: Option<&Scenario>,
    axes: &SweepAxes,
    pru: &PruConfig,
    base: &LatticeSettings,
    models: &ModelSource,
    mode: UnitMode,
    skip: &BTreeSet<(u32, KeyframeStrategy, PropagationMethod)>,
) -> Result<Vec<SweepRow>> {
    axes.validate()?;
    let cells: Vec<_> = axes.cells().into_iter().filter(|c| !skip.contains(c)).collect();
    if cells.is_empty() {
        return Ok(Vec::new());
    }
    let videos: Vec<(Scenario, RenderedVideo, ScalePyramid)> = axes
        .seeds
        .par_iter()
        .map(|&seed| {
            let sc = scenario(seed)?;
            let v = sc.render()?;
            let p = ScalePyramid::build(&v.frames, &pru.scale_levels);
            Ok((sc, v, p))
        })
        .collect::<Result<_>>()?;

    let mut thresholds: BTreeMap<u32, f64> = BTreeMap::new();
    if base.easiness_thresh.is_none() && cells.iter().any(|c| c.1 == KeyframeStrategy::Adaptive) {
        let cal = calibration.ok_or_else(|| Error::config("adaptive cells need a threshold or a calibration scenario"))?;
        let v = cal.render()?;
        let det = SimulatedDetector::new(&v, cal.detector.clone());
        for &(interval, strategy, _) in &cells {
            if strategy == KeyframeStrategy::Adaptive && !thresholds.contains_key(&interval) {
                let t = calibrate_easiness(&det, v.n_frames(), interval, base.easiness, base.easiness_quantile)?;
                thresholds.insert(interval, t);
            }
        }
    }

    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..videos.len()).map(move |v| (c, v))).collect();
    let results: Vec<(usize, crate::eval::EvalResult, usize)> = jobs
        .par_iter()
        .map(|&(c, vi)| {
            let (interval, strategy, propagator) = cells[c];
            let (sc, video, pyr) = &videos[vi];
            let s = LatticeSettings {
                strategy,
                interval,
                propagator,
                easiness_thresh: base.easiness_thresh.or(thresholds.get(&interval).copied()),
                ..base.clone()
            };
            let (reg_t, reg_s) = models(propagator, video)?;
            let det = SimulatedDetector::new(video, sc.detector.clone());
            let comps = Components {
                reg_t: reg_t.as_ref(),
                reg_s: reg_s.as_ref(),
                mode,
                classifier: None,
            };
            let out = run(video, pyr, &det, pru, &s, comps)?;
            Ok((c, out.eval, out.selection.keyframes.len()))
        })
        .collect::<Result<_>>()?;

    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, &(interval, strategy, propagator))| {
            let mine: Vec<_> = results.iter().filter(|r| r.0 == c).collect();
            let opt = |f: &dyn Fn(&crate::eval::EvalResult) -> Option<f64>| {
                let (m, n) = mean(mine.iter().filter_map(|r| f(&r.1)));
                (n > 0).then_some(m)
            };
            let (cost, _) = mean(mine.iter().map(|r| r.1.total_cost_ms));
            let n_frames = mine.first().map_or(0, |r| r.1.n_frames);
            SweepRow {
                interval,
                strategy,
                propagator,
                seeds: mine.len(),
                map: mean(mine.iter().map(|r| r.1.map)).0,
                recall: mean(mine.iter().map(|r| r.1.recall)).0,
                map_slow: opt(&|e| e.breakdown.slow),
                map_medium: opt(&|e| e.breakdown.medium),
                map_fast: opt(&|e| e.breakdown.fast),
                cost_ms: cost,
                fps: if cost > 0.0 { 1000.0 * n_frames as f64 / cost } else { f64::INFINITY },
                keyframes: mean(mine.iter().map(|r| r.2 as f64)).0,
            }
        })
        .collect())
}
