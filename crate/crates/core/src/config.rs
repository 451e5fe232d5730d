//! Run configuration file (TOML, strict).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::SweepAxes;
use crate::experiments::ExperimentConfig;
use crate::pipeline::LatticeSettings;
use crate::pru::{
    IdentityRegressor, OracleMode, OracleRegressor, PropagationMethod, PruConfig, PruVariant, Regressor,
    TrainConfig, TrainedPru, UnitMode,
};
use crate::synth::{preset, DetectorProfile, GroundTruthFrame, Scenario};
use crate::tube::{ConstantClassifier, OracleClassifier, TubeClassifier};

/// Where videos come from: a bundled preset or a scenario file. Exactly one
/// must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl ScenarioSource {
    pub fn preset(name: &str) -> Self {
        ScenarioSource {
            preset: Some(name.into()),
            path: None,
        }
    }

    fn validate(&self) -> Result<()> {
        match (&self.preset, &self.path) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::config("scenario needs exactly one of 'preset' and 'path'")),
        }
    }

    /// The scenario for `seed`. A file scenario keeps its scripts; the seed
    /// only reseeds its detector.
    pub fn build(&self, seed: u64) -> Result<Scenario> {
        self.validate()?;
        match (&self.preset, &self.path) {
            (Some(name), _) => preset(name, seed),
            (_, Some(path)) => {
                let mut sc = Scenario::load(path)?;
                sc.detector.seed = seed;
                Ok(sc)
            }
            _ => unreachable!(),
        }
    }
}

/// Detector used on key frames.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DetectorChoice {
    /// Whatever the scenario specifies.
    #[default]
    Scenario,
    Noiseless,
    /// Replaces the scenario profile; its seed is kept per run.
    Custom { profile: DetectorProfile },
}

impl DetectorChoice {
    pub fn apply(&self, sc: &mut Scenario) {
        let seed = sc.detector.seed;
        match self {
            DetectorChoice::Scenario => {}
            DetectorChoice::Noiseless => sc.detector = DetectorProfile { seed, ..DetectorProfile::noiseless() },
            DetectorChoice::Custom { profile } => sc.detector = DetectorProfile { seed, ..*profile },
        }
    }
}

/// Propagation and refinement regressors for run and sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelChoice {
    /// Ground-truth lookups with optional Gaussian noise on the deltas.
    Oracle {
        #[serde(default)]
        sigma: f64,
    },
    /// Boxes stay where they are.
    Identity,
    /// Weights written by `train`, from `dir/<method>-<variant>/`.
    /// `dir` defaults to `<out>/models`.
    Trained {
        #[serde(default)]
        variant: PruVariant,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
    },
}

impl Default for ModelChoice {
    fn default() -> Self {
        ModelChoice::Oracle { sigma: 0.0 }
    }
}

/// Owned regressors plus the unit mode they need.
pub struct ModelSet {
    pub reg_t: Arc<dyn Regressor>,
    pub reg_s: Arc<dyn Regressor>,
    pub mode: UnitMode,
}

pub fn model_dir_name(method: PropagationMethod, variant: PruVariant) -> String {
    format!("{}-{}", method.name(), variant.name())
}

impl ModelChoice {
    pub fn load(&self, method: PropagationMethod, gt: &[GroundTruthFrame], seed: u64, out: &Path) -> Result<ModelSet> {
        let identity = || -> Arc<dyn Regressor> { Arc::new(IdentityRegressor) };
        match self {
            _ if method == PropagationMethod::Interp => Ok(ModelSet {
                reg_t: identity(),
                reg_s: identity(),
                mode: UnitMode::TwoStep,
            }),
            ModelChoice::Identity => Ok(ModelSet {
                reg_t: identity(),
                reg_s: identity(),
                mode: UnitMode::TwoStep,
            }),
            ModelChoice::Oracle { sigma } => {
                let gt = Arc::new(gt.to_vec());
                Ok(ModelSet {
                    reg_t: Arc::new(OracleRegressor::new(gt.clone(), OracleMode::Motion, *sigma, seed)),
                    reg_s: Arc::new(OracleRegressor::new(gt, OracleMode::Offset, *sigma, seed ^ 0x5eed)),
                    mode: UnitMode::TwoStep,
                })
            }
            ModelChoice::Trained { variant, dir } => {
                let root = dir.clone().unwrap_or_else(|| out.join("models"));
                let path = root.join(model_dir_name(method, *variant));
                if !path.is_dir() {
                    return Err(Error::config(format!(
                        "no trained model at {} (run `stlattice train` first)",
                        path.display()
                    )));
                }
                let m = TrainedPru::load_dir(&path)?;
                if m.method != method || m.variant != *variant {
                    return Err(Error::config(format!("{} holds a different model", path.display())));
                }
                Ok(match m.reg_s {
                    Some(s) => ModelSet {
                        reg_t: Arc::new(m.reg_t),
                        reg_s: Arc::new(s),
                        mode: UnitMode::TwoStep,
                    },
                    None => ModelSet {
                        reg_t: Arc::new(m.reg_t),
                        reg_s: identity(),
                        mode: UnitMode::SingleStep,
                    },
                })
            }
        }
    }
}

/// Optional tube classifier for rescoring.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClassifierChoice {
    #[default]
    None,
    Oracle {
        #[serde(default = "one")]
        accuracy: f64,
    },
    Constant {
        label: u32,
        score: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl ClassifierChoice {
    pub fn build(&self, gt: &[GroundTruthFrame], seed: u64) -> Result<Option<Box<dyn TubeClassifier>>> {
        Ok(match *self {
            ClassifierChoice::None => None,
            ClassifierChoice::Oracle { accuracy } => {
                Some(Box::new(OracleClassifier::new(Arc::new(gt.to_vec()), accuracy, seed)?))
            }
            ClassifierChoice::Constant { label, score } => {
                if !(0.0..=1.0).contains(&score) {
                    return Err(Error::config(format!("constant classifier score {score} outside [0, 1]")));
                }
                Some(Box::new(ConstantClassifier { label, score }))
            }
        })
    }
}

/// What `train` fits and on which videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub scenario: ScenarioSource,
    pub seeds: Vec<u64>,
    pub methods: Vec<PropagationMethod>,
    pub variants: Vec<PruVariant>,
    pub config: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            scenario: ScenarioSource::preset("train"),
            seeds: (100..106).collect(),
            methods: vec![PropagationMethod::Mhi],
            variants: vec![PruVariant::A],
            config: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioSource,
    pub detector: DetectorChoice,
    pub seeds: Vec<u64>,
    /// Seed of the scenario the easiness threshold is calibrated on when
    /// adaptive key frames have no fixed threshold.
    pub calibration_seed: u64,
    pub out: PathBuf,
    pub models: ModelChoice,
    pub classifier: ClassifierChoice,
    pub lattice: LatticeSettings,
    pub pru: PruConfig,
    pub train: TrainSection,
    pub sweep: SweepAxes,
    pub experiments: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: ScenarioSource::preset("fast"),
            detector: DetectorChoice::Scenario,
            seeds: vec![0],
            calibration_seed: 1000,
            out: PathBuf::from("out"),
            models: ModelChoice::default(),
            classifier: ClassifierChoice::None,
            lattice: LatticeSettings::default(),
            pru: PruConfig::default(),
            train: TrainSection::default(),
            sweep: SweepAxes::default(),
            experiments: ExperimentConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("config", e))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("config", e))
    }

    /// Parses a config file. Relative paths are taken relative to the file's
    /// directory, and every input file it names must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.scenario.path, &mut cfg.train.scenario.path].into_iter().flatten() {
            resolve(base, p);
        }
        if let ModelChoice::Trained { dir: Some(d), .. } = &mut cfg.models {
            resolve(base, d);
        }
        resolve(base, &mut cfg.out);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.scenario.validate()?;
        for p in [&self.scenario.path, &self.train.scenario.path].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::config(format!("scenario file {} does not exist", p.display())));
            }
        }
        if let ModelChoice::Trained { dir: Some(d), .. } = &self.models {
            if !d.is_dir() {
                return Err(Error::config(format!("model directory {} does not exist", d.display())));
            }
        }
        if let ModelChoice::Oracle { sigma } = self.models {
            if !(sigma >= 0.0) {
                return Err(Error::config("oracle sigma must be non-negative"));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.train.seeds.is_empty() || self.train.methods.is_empty() || self.train.variants.is_empty() {
            return Err(Error::config("train needs seeds, methods and variants"));
        }
        if self.train.methods.contains(&PropagationMethod::Interp) {
            return Err(Error::config("interpolation has nothing to train"));
        }
        self.train.config.validate()?;
        self.lattice.validate(&self.pru)?;
        self.sweep.validate()?;
        self.experiments.validate()
    }

    /// Scenario for `seed` with the detector choice applied.
    pub fn scenario_for(&self, seed: u64) -> Result<Scenario> {
        let mut sc = self.scenario.build(seed)?;
        self.detector.apply(&mut sc);
        Ok(sc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seedz = [1]").is_err());
        assert!(RunConfig::from_toml("[lattice]\nintervall = 3").is_err());
        assert!(RunConfig::from_toml("[models]\nkind = \"oracle\"\nsgima = 1.0").is_err());
        assert!(RunConfig::from_toml("[classifier]\nkind = \"magic\"").is_err());
    }

    #[test]
    fn tagged_sections_parse() {
        let cfg = RunConfig::from_toml(
            "[models]\nkind = \"trained\"\nvariant = \"d\"\n[classifier]\nkind = \"oracle\"\n[detector]\nkind = \"noiseless\"",
        )
        .unwrap();
        assert_eq!(
            cfg.models,
            ModelChoice::Trained {
                variant: PruVariant::D,
                dir: None
            }
        );
        assert_eq!(cfg.classifier, ClassifierChoice::Oracle { accuracy: 1.0 });
        let sc = cfg.scenario_for(3).unwrap();
        assert_eq!(sc.detector, DetectorProfile { seed: sc.detector.seed, ..DetectorProfile::noiseless() });
    }

    #[test]
    fn scenario_needs_exactly_one_source() {
        let cfg = RunConfig::from_toml("[scenario]\npreset = \"fast\"\npath = \"x.toml\"").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::from_toml("[scenario]").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_files_fail_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[scenario]\npath = \"nope.toml\"").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.is_usage(), "{err}");
        fs::write(dir.path().join("s.toml"), preset("static", 0).unwrap().to_toml().unwrap()).unwrap();
        fs::write(&path, "[scenario]\npath = \"s.toml\"").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.scenario.path.as_deref(), Some(dir.path().join("s.toml").as_path()));
        assert_eq!(cfg.out, dir.path().join("out"));
    }
}
