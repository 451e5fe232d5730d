//! Commands behind the `stlattice` binary. Each writes its files under the
//! configured output directory and returns what it wrote.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{model_dir_name, ModelChoice, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{sweep, EvalResult, SweepRow, SWEEP_HEADER};
use crate::experiments::{ablate, required_models, AblationReport, ModelBank};
use crate::lattice::EdgeKind;
use crate::motion::pgm;
use crate::pipeline::{calibrate_easiness, per_node_map, run, Components, KeyframeStrategy, NodeScore};
use crate::pru::{train_regressors, PruVariant, ScalePyramid, TrainConfig, TrainedPru, TrainingSet, UnitMode};
use crate::synth::{jsonl, Scenario, SimulatedDetector};
use crate::tube::tubes_to_json;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub dir: PathBuf,
    pub n_frames: u32,
    pub n_boxes: usize,
}

/// Renders a scenario to `dir/frames/NNNNNN.pgm`, `dir/gt.jsonl` and the
/// manifest `dir/scenario.toml`.
pub fn cmd_gen(scenario: &Scenario, dir: &Path) -> Result<GenReport> {
    let video = scenario.render()?;
    let frames = dir.join("frames");
    create_dir(&frames)?;
    video
        .frames
        .par_iter()
        .enumerate()
        .try_for_each(|(t, f)| pgm::write(frames.join(format!("{t:06}.pgm")), f))?;
    let records: Vec<jsonl::FrameRecord> = video.gt.iter().map(Into::into).collect();
    jsonl::write(dir.join("gt.jsonl"), &records)?;
    write_file(&dir.join("scenario.toml"), scenario.to_toml()?)?;
    Ok(GenReport {
        dir: dir.to_path_buf(),
        n_frames: video.n_frames(),
        n_boxes: video.gt.iter().map(|f| f.boxes.len()).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub dir: PathBuf,
    pub model: String,
    pub samples: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Training phases of a variant, in the order their losses were recorded.
fn phases(variant: PruVariant) -> &'static [&'static str] {
    match variant {
        PruVariant::A | PruVariant::B => &["joint"],
        PruVariant::C => &["propagation", "refinement"],
        PruVariant::D => &["propagation"],
    }
}

/// `phase,epoch,loss`, one row per epoch of each phase.
fn write_loss_csv(path: &Path, model: &TrainedPru) -> Result<()> {
    let names = phases(model.variant);
    let per_phase = model.loss_curve.len() / names.len();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse("loss csv", e))?;
    w.write_record(["phase", "epoch", "loss"]).map_err(|e| Error::parse("loss csv", e))?;
    for (i, l) in model.loss_curve.iter().enumerate() {
        let phase = names[(i / per_phase.max(1)).min(names.len() - 1)];
        w.write_record([phase.to_string(), (i % per_phase.max(1)).to_string(), l.to_string()])
            .map_err(|e| Error::parse("loss csv", e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fits every configured (method, variant) on the training scenario and
/// writes `out/models/<method>-<variant>/` with the weights, `meta.json` and
/// `loss.csv`.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<TrainReport>> {
    cfg.validate()?;
    let t = &cfg.train;
    let scenarios: Vec<Scenario> = t.seeds.iter().map(|&s| t.scenario.build(s)).collect::<Result<_>>()?;
    let root = cfg.out.join("models");
    let mut reports = Vec::new();
    for &method in &t.methods {
        let base = TrainConfig {
            method,
            ..t.config.clone()
        };
        let set = TrainingSet::generate(&scenarios, &cfg.pru, &base)?;
        let trained: Vec<TrainedPru> = t
            .variants
            .par_iter()
            .map(|&variant| train_regressors(&set, &cfg.pru, &TrainConfig { variant, ..base.clone() }))
            .collect::<Result<_>>()?;
        for m in trained {
            let name = model_dir_name(m.method, m.variant);
            let dir = root.join(&name);
            m.save_dir(&dir)?;
            write_loss_csv(&dir.join("loss.csv"), &m)?;
            reports.push(TrainReport {
                dir,
                model: name,
                samples: set.samples.len(),
                first_loss: m.loss_curve.first().copied().unwrap_or(f64::NAN),
                final_loss: m.loss_curve.last().copied().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeCost {
    pub kind: EdgeKind,
    pub count: usize,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub scenario: String,
    pub strategy: KeyframeStrategy,
    pub interval: u32,
    pub propagator: crate::pru::PropagationMethod,
    pub easiness_thresh: Option<f64>,
    pub keyframes: Vec<u32>,
    pub edge_costs: Vec<EdgeCost>,
    pub eval: EvalResult,
    /// Before tube rescoring, when a classifier is configured.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_before_rescore: Option<EvalResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_node: Option<Vec<NodeScore>>,
}

/// Easiness threshold for adaptive runs: the configured one or a fresh
/// calibration on the calibration seed.
fn easiness_threshold(cfg: &RunConfig, interval: u32) -> Result<Option<f64>> {
    let s = &cfg.lattice;
    if s.strategy != KeyframeStrategy::Adaptive || s.easiness_thresh.is_some() {
        return Ok(s.easiness_thresh);
    }
    let sc = cfg.scenario_for(cfg.calibration_seed)?;
    let v = sc.render()?;
    let det = SimulatedDetector::new(&v, sc.detector.clone());
    calibrate_easiness(&det, v.n_frames(), interval, s.easiness, s.easiness_quantile).map(Some)
}

/// One pipeline run per configured seed. Writes `run_<seed>.json`,
/// `lattice_<seed>.json` and, with a classifier, `tubes_<seed>.json`.
pub fn cmd_run(cfg: &RunConfig, per_node_eval: bool) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    let settings = crate::pipeline::LatticeSettings {
        easiness_thresh: easiness_threshold(cfg, cfg.lattice.interval)?,
        ..cfg.lattice.clone()
    };
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let sc = cfg.scenario_for(seed)?;
        let video = sc.render()?;
        let pyramid = ScalePyramid::build(&video.frames, &cfg.pru.scale_levels);
        let det = SimulatedDetector::new(&video, sc.detector.clone());
        let models = cfg.models.load(settings.propagator, &video.gt, seed, &cfg.out)?;
        let classifier = cfg.classifier.build(&video.gt, seed)?;
        let comps = Components {
            reg_t: models.reg_t.as_ref(),
            reg_s: models.reg_s.as_ref(),
            mode: models.mode,
            classifier: classifier.as_deref(),
        };
        let out = run(&video, &pyramid, &det, &cfg.pru, &settings, comps)?;
        let mut costs: BTreeMap<EdgeKind, (usize, f64)> = BTreeMap::new();
        for e in &out.exec.graph.edges {
            let c = costs.entry(e.kind).or_default();
            c.0 += 1;
            c.1 += e.cost_ms;
        }
        let per_node = if per_node_eval {
            Some(per_node_map(&out.exec, &video, &cfg.pru, settings.eval.iou_thresh)?)
        } else {
            None
        };
        let report = RunReport {
            seed,
            scenario: sc.name.clone(),
            strategy: settings.strategy,
            interval: settings.interval,
            propagator: settings.propagator,
            easiness_thresh: settings.easiness_thresh,
            keyframes: out.selection.keyframes.clone(),
            edge_costs: costs
                .into_iter()
                .map(|(kind, (count, total_ms))| EdgeCost { kind, count, total_ms })
                .collect(),
            eval: out.eval.clone(),
            eval_before_rescore: out.rescored.as_ref().map(|r| r.eval_before.clone()),
            per_node,
        };
        write_file(&cfg.out.join(format!("run_{seed}.json")), to_json(&report))?;
        write_file(&cfg.out.join(format!("lattice_{seed}.json")), out.exec.graph.to_json())?;
        if let Some(r) = &out.rescored {
            write_file(&cfg.out.join(format!("tubes_{seed}.json")), tubes_to_json(&r.before, &r.after)?)?;
        }
        reports.push(report);
    }
    Ok(reports)
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::parse(path.display().to_string(), e))?
        .iter()
        .map(String::from)
        .collect();
    if header.join(",") != SWEEP_HEADER {
        return Err(Error::config(format!("{} has an unexpected header", path.display())));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::parse(path.display().to_string(), e)))
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse("sweep csv", e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::parse("sweep csv", e))?;
    }
    if rows.is_empty() {
        w.write_record(SWEEP_HEADER.split(',')).map_err(|e| Error::parse("sweep csv", e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Full-factorial sweep into `out/sweep.csv`. With `resume`, cells already
/// in that file are kept and not rerun.
pub fn cmd_sweep(cfg: &RunConfig, resume: bool) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    let path = cfg.out.join("sweep.csv");
    let existing = if resume && path.exists() {
        read_sweep_csv(&path)?
    } else {
        Vec::new()
    };
    let cells = cfg.sweep.cells();
    let done: BTreeSet<_> = existing.iter().map(SweepRow::key).filter(|k| cells.contains(k)).collect();
    let calibration = cfg.scenario_for(cfg.calibration_seed)?;
    let mode = match cfg.models {
        ModelChoice::Trained {
            variant: PruVariant::D, ..
        } => UnitMode::SingleStep,
        _ => UnitMode::TwoStep,
    };
    let models = |method, video: &crate::synth::RenderedVideo| {
        let m = cfg.models.load(method, &video.gt, 0, &cfg.out)?;
        Ok((m.reg_t, m.reg_s))
    };
    let fresh = sweep(
        &|seed| cfg.scenario_for(seed),
        Some(&calibration),
        &cfg.sweep,
        &cfg.pru,
        &cfg.lattice,
        &models,
        mode,
        &done,
    )?;
    let mut by_key: BTreeMap<_, SweepRow> = existing.into_iter().map(|r| (r.key(), r)).collect();
    by_key.extend(fresh.into_iter().map(|r| (r.key(), r)));
    let rows: Vec<SweepRow> = cells.iter().filter_map(|k| by_key.remove(k)).collect();
    write_sweep_csv(&path, &rows)?;
    Ok(rows)
}

/// Runs every comparison recipe and writes `out/ablation.json`. Models come
/// from the configured directory when `models` is `trained`; otherwise they
/// are trained and saved under `out/models`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationReport> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    let bank = match &cfg.models {
        ModelChoice::Trained { dir, .. } => {
            let root = dir.clone().unwrap_or_else(|| cfg.out.join("models"));
            let mut bank = ModelBank::default();
            for (m, v) in required_models() {
                let path = root.join(model_dir_name(m, v));
                if !path.is_dir() {
                    return Err(Error::config(format!("ablation needs a trained model at {}", path.display())));
                }
                bank.insert(TrainedPru::load_dir(path)?);
            }
            bank
        }
        _ => {
            let keys = required_models();
            let bank = ModelBank::train(&cfg.experiments, &cfg.pru, &keys)?;
            for (m, v) in keys {
                let dir = cfg.out.join("models").join(model_dir_name(m, v));
                let model = bank.get(m, v).expect("just trained");
                model.save_dir(&dir)?;
                write_loss_csv(&dir.join("loss.csv"), model)?;
            }
            bank
        }
    };
    let report = ablate(&cfg.experiments, &cfg.pru, &cfg.lattice, &bank)?;
    write_file(&cfg.out.join("ablation.json"), to_json(&report))?;
    Ok(report)
}
