//! Comparison recipes on bundled scenarios, averaged over seeds: propagation
//! methods, unit variants, key frame strategies at equal detector budget,
//! and tube rescoring.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::lattice::{detect_keyframes, select_uniform_count};
use crate::pipeline::{
    calibrate_easiness, run, run_with_selection, Components, KeyframeStrategy, LatticeSettings, RunOutput,
};
use crate::pru::{
    train_regressors, IdentityRegressor, PropagationMethod, PruConfig, PruVariant, ScalePyramid, TrainConfig,
    TrainedPru, TrainingSet, UnitMode,
};
use crate::synth::{preset, RenderedVideo, Scenario, SimulatedDetector};
use crate::tube::OracleClassifier;

static IDENTITY: IdentityRegressor = IdentityRegressor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Preset the regressors are trained on, and its seeds.
    pub train_preset: String,
    pub train_seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Evaluation seeds shared by every recipe.
    pub seeds: Vec<u64>,
    pub interval: u32,
    pub propagation_scenario: String,
    pub variant_scenario: String,
    pub keyframe_scenario: String,
    pub keyframe_intervals: Vec<u32>,
    /// Seed of the keyframe scenario the easiness threshold is calibrated on.
    pub calibration_seed: u64,
    pub rescore_scenario: String,
    pub classifier_accuracy: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train_preset: "train".into(),
            train_seeds: (100..106).collect(),
            train: TrainConfig::default(),
            seeds: (0..5).collect(),
            interval: 24,
            propagation_scenario: "fast".into(),
            variant_scenario: "fast".into(),
            keyframe_scenario: "mixed".into(),
            keyframe_intervals: vec![8, 16, 24],
            calibration_seed: 1000,
            rescore_scenario: "noisy".into(),
            classifier_accuracy: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train_seeds.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("experiments need training and evaluation seeds"));
        }
        if self.keyframe_intervals.iter().any(|&i| i < 2) {
            return Err(Error::config("key frame intervals must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.classifier_accuracy) {
            return Err(Error::config("classifier_accuracy must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Trained units keyed by propagation method and variant.
#[derive(Debug, Clone, Default)]
pub struct ModelBank {
    models: BTreeMap<(PropagationMethod, PruVariant), TrainedPru>,
}

impl ModelBank {
    /// Trains every requested (method, variant) pair on the training preset.
    /// Interpolation needs no model and is skipped.
    pub fn train(cfg: &ExperimentConfig, pru: &PruConfig, wanted: &[(PropagationMethod, PruVariant)]) -> Result<Self> {
        cfg.validate()?;
        let scenarios: Vec<Scenario> = cfg
            .train_seeds
            .iter()
            .map(|&s| preset(&cfg.train_preset, s))
            .collect::<Result<_>>()?;
        let mut by_method: BTreeMap<PropagationMethod, Vec<PruVariant>> = BTreeMap::new();
        for &(m, v) in wanted {
            if m != PropagationMethod::Interp {
                by_method.entry(m).or_default().push(v);
            }
        }
        let mut bank = ModelBank::default();
        for (method, variants) in by_method {
            let base = TrainConfig {
                method,
                ..cfg.train.clone()
            };
            let set = TrainingSet::generate(&scenarios, pru, &base)?;
            let trained: Vec<TrainedPru> = variants
                .par_iter()
                .map(|&variant| train_regressors(&set, pru, &TrainConfig { variant, ..base.clone() }))
                .collect::<Result<_>>()?;
            for t in trained {
                bank.insert(t);
            }
        }
        Ok(bank)
    }

    pub fn insert(&mut self, model: TrainedPru) {
        self.models.insert((model.method, model.variant), model);
    }

    pub fn get(&self, method: PropagationMethod, variant: PruVariant) -> Option<&TrainedPru> {
        self.models.get(&(method, variant))
    }

    /// Pipeline components for a method and variant. Interpolation gets
    /// identity regressors, which it never calls.
    pub fn components(&self, method: PropagationMethod, variant: PruVariant) -> Result<Components<'_>> {
        if method == PropagationMethod::Interp {
            return Ok(Components {
                reg_t: &IDENTITY,
                reg_s: &IDENTITY,
                mode: UnitMode::TwoStep,
                classifier: None,
            });
        }
        let m = self.get(method, variant).ok_or_else(|| {
            Error::config(format!("no trained {} model for variant {}", method.name(), variant.name()))
        })?;
        Ok(match &m.reg_s {
            Some(s) => Components {
                reg_t: &m.reg_t,
                reg_s: s,
                mode: UnitMode::TwoStep,
                classifier: None,
            },
            None => Components {
                reg_t: &m.reg_t,
                reg_s: &IDENTITY,
                mode: UnitMode::SingleStep,
                classifier: None,
            },
        })
    }
}

/// Seed-averaged metrics of one configuration. Bucket means cover the seeds
/// where the bucket has ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: usize,
    pub map: f64,
    pub recall: f64,
    pub map_slow: Option<f64>,
    pub map_medium: Option<f64>,
    pub map_fast: Option<f64>,
    pub cost_ms: f64,
    /// Mean detector invocations per video.
    pub keyframes: f64,
}

impl Summary {
    fn of(runs: &[(EvalResult, usize)]) -> Self {
        let n = runs.len() as f64;
        let bucket = |f: fn(&EvalResult) -> Option<f64>| {
            let v: Vec<f64> = runs.iter().filter_map(|r| f(&r.0)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Summary {
            seeds: runs.len(),
            map: runs.iter().map(|r| r.0.map).sum::<f64>() / n,
            recall: runs.iter().map(|r| r.0.recall).sum::<f64>() / n,
            map_slow: bucket(|e| e.breakdown.slow),
            map_medium: bucket(|e| e.breakdown.medium),
            map_fast: bucket(|e| e.breakdown.fast),
            cost_ms: runs.iter().map(|r| r.0.total_cost_ms).sum::<f64>() / n,
            keyframes: runs.iter().map(|r| r.1 as f64).sum::<f64>() / n,
        }
    }
}

struct Prepared {
    scenario: Scenario,
    video: RenderedVideo,
    pyramid: ScalePyramid,
}

fn prepare(name: &str, seeds: &[u64], pru: &PruConfig) -> Result<Vec<Prepared>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let scenario = preset(name, seed)?;
            let video = scenario.render()?;
            let pyramid = ScalePyramid::build(&video.frames, &pru.scale_levels);
            Ok(Prepared {
                scenario,
                video,
                pyramid,
            })
        })
        .collect()
}

fn run_on(p: &Prepared, pru: &PruConfig, s: &LatticeSettings, comps: Components) -> Result<RunOutput> {
    let det = SimulatedDetector::new(&p.video, p.scenario.detector.clone());
    run(&p.video, &p.pyramid, &det, pru, s, comps)
}

fn summarize(outs: &[RunOutput]) -> Summary {
    let runs: Vec<_> = outs.iter().map(|o| (o.eval.clone(), o.selection.keyframes.len())).collect();
    Summary::of(&runs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationRow {
    pub propagator: PropagationMethod,
    pub summary: Summary,
}

/// Every propagation method (variant `A` units) at `cfg.interval`.
pub fn compare_propagation(
    cfg: &ExperimentConfig,
    pru: &PruConfig,
    base: &LatticeSettings,
    bank: &ModelBank,
) -> Result<Vec<PropagationRow>> {
    let videos = prepare(&cfg.propagation_scenario, &cfg.seeds, pru)?;
    PropagationMethod::ALL
        .iter()
        .map(|&propagator| {
            let s = LatticeSettings {
                strategy: KeyframeStrategy::Uniform,
                interval: cfg.interval,
                propagator,
                ..base.clone()
            };
            let comps = bank.components(propagator, PruVariant::A)?;
            let outs: Vec<RunOutput> = videos.par_iter().map(|p| run_on(p, pru, &s, comps)).collect::<Result<_>>()?;
            Ok(PropagationRow {
                propagator,
                summary: summarize(&outs),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: PruVariant,
    pub summary: Summary,
}

/// Unit variants with MHI propagation at `cfg.interval`.
pub fn compare_variants(
    cfg: &ExperimentConfig,
    pru: &PruConfig,
    base: &LatticeSettings,
    bank: &ModelBank,
) -> Result<Vec<VariantRow>> {
    let videos = prepare(&cfg.variant_scenario, &cfg.seeds, pru)?;
    let s = LatticeSettings {
        strategy: KeyframeStrategy::Uniform,
        interval: cfg.interval,
        propagator: PropagationMethod::Mhi,
        ..base.clone()
    };
    PruVariant::ALL
        .iter()
        .map(|&variant| {
            let comps = bank.components(PropagationMethod::Mhi, variant)?;
            let outs: Vec<RunOutput> = videos.par_iter().map(|p| run_on(p, pru, &s, comps)).collect::<Result<_>>()?;
            Ok(VariantRow {
                variant,
                summary: summarize(&outs),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeRow {
    pub interval: u32,
    pub threshold: f64,
    pub adaptive: Summary,
    /// Uniform placement with the same detector invocations per video.
    pub uniform: Summary,
}

impl KeyframeRow {
    pub fn gap(&self) -> f64 {
        self.adaptive.map - self.uniform.map
    }
}

/// Adaptive selection against uniform placement of as many key frames,
/// per seed, with MHI variant `A` units.
pub fn compare_keyframes(
    cfg: &ExperimentConfig,
    pru: &PruConfig,
    base: &LatticeSettings,
    bank: &ModelBank,
) -> Result<Vec<KeyframeRow>> {
    let videos = prepare(&cfg.keyframe_scenario, &cfg.seeds, pru)?;
    let cal = preset(&cfg.keyframe_scenario, cfg.calibration_seed)?;
    let cal_video = cal.render()?;
    let cal_det = SimulatedDetector::new(&cal_video, cal.detector.clone());
    let comps = bank.components(PropagationMethod::Mhi, PruVariant::A)?;
    cfg.keyframe_intervals
        .iter()
        .map(|&interval| {
            let threshold = calibrate_easiness(
                &cal_det,
                cal_video.n_frames(),
                interval,
                base.easiness,
                base.easiness_quantile,
            )?;
            let s = LatticeSettings {
                strategy: KeyframeStrategy::Adaptive,
                interval,
                easiness_thresh: Some(threshold),
                propagator: PropagationMethod::Mhi,
                ..base.clone()
            };
            let pairs: Vec<(RunOutput, RunOutput)> = videos
                .par_iter()
                .map(|p| {
                    let adaptive = run_on(p, pru, &s, comps)?;
                    let det = SimulatedDetector::new(&p.video, p.scenario.detector.clone());
                    let frames = select_uniform_count(p.video.n_frames(), adaptive.selection.keyframes.len())?;
                    let selection = detect_keyframes(&det, &frames)?;
                    let uniform_s = LatticeSettings {
                        strategy: KeyframeStrategy::Uniform,
                        ..s.clone()
                    };
                    let uniform = run_with_selection(&p.video, &p.pyramid, pru, &uniform_s, comps, selection)?;
                    Ok((adaptive, uniform))
                })
                .collect::<Result<_>>()?;
            let (a, u): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            Ok(KeyframeRow {
                interval,
                threshold,
                adaptive: summarize(&a),
                uniform: summarize(&u),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescoreRow {
    pub accuracy: f64,
    pub before: Summary,
    pub after: Summary,
}

/// Tube rescoring with an oracle classifier of `cfg.classifier_accuracy`,
/// MHI variant `A` units at `cfg.interval`.
pub fn compare_rescoring(
    cfg: &ExperimentConfig,
    pru: &PruConfig,
    base: &LatticeSettings,
    bank: &ModelBank,
) -> Result<RescoreRow> {
    let videos = prepare(&cfg.rescore_scenario, &cfg.seeds, pru)?;
    let s = LatticeSettings {
        strategy: KeyframeStrategy::Uniform,
        interval: cfg.interval,
        propagator: PropagationMethod::Mhi,
        ..base.clone()
    };
    let comps = bank.components(PropagationMethod::Mhi, PruVariant::A)?;
    let runs: Vec<((EvalResult, usize), (EvalResult, usize))> = videos
        .par_iter()
        .zip(&cfg.seeds)
        .map(|(p, &seed)| {
            let cls = OracleClassifier::new(Arc::new(p.video.gt.clone()), cfg.classifier_accuracy, seed)?;
            let out = run_on(
                p,
                pru,
                &s,
                Components {
                    classifier: Some(&cls),
                    ..comps
                },
            )?;
            let k = out.selection.keyframes.len();
            let r = out.rescored.expect("classifier given");
            Ok(((r.eval_before, k), (out.eval, k)))
        })
        .collect::<Result<_>>()?;
    let (before, after): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    Ok(RescoreRow {
        accuracy: cfg.classifier_accuracy,
        before: Summary::of(&before),
        after: Summary::of(&after),
    })
}

/// Every recipe's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub propagation: Vec<PropagationRow>,
    pub variants: Vec<VariantRow>,
    pub keyframes: Vec<KeyframeRow>,
    pub rescoring: RescoreRow,
}

/// The (method, variant) pairs [`ablate`] needs.
pub fn required_models() -> Vec<(PropagationMethod, PruVariant)> {
    let mut out: Vec<_> = PruVariant::ALL.iter().map(|&v| (PropagationMethod::Mhi, v)).collect();
    out.push((PropagationMethod::Rgbdiff, PruVariant::A));
    out
}

/// Runs every recipe with one shared model bank.
pub fn ablate(
    cfg: &ExperimentConfig,
    pru: &PruConfig,
    base: &LatticeSettings,
    bank: &ModelBank,
) -> Result<AblationReport> {
    cfg.validate()?;
    base.validate(pru)?;
    Ok(AblationReport {
        propagation: compare_propagation(cfg, pru, base, bank)?,
        variants: compare_variants(cfg, pru, base, bank)?,
        keyframes: compare_keyframes(cfg, pru, base, bank)?,
        rescoring: compare_rescoring(cfg, pru, base, bank)?,
    })
}
