use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{encode_delta, iou, BBox, BoxDelta};
use crate::motion::{FeatureVec, FEATURE_LEN};
use crate::synth::GroundTruthFrame;

/// Tag stored with serialized weights; bump when the feature layout changes.
pub const FEATURE_VERSION: &str = "stl-features-11-v1";

/// Everything a regressor may look at for one box.
///
/// `roi` is in the coordinates of the raster the features were pooled from,
/// and `scale` is that raster's factor relative to native resolution.
/// Refinement queries have `t_from == t_to`.
#[derive(Debug, Clone, Copy)]
pub struct RegressionQuery<'a> {
    pub features: &'a FeatureVec,
    pub roi: BBox,
    pub scale: f64,
    pub t_from: u32,
    pub t_to: u32,
    pub class_id: u32,
}

pub trait Regressor: Send + Sync {
    fn predict(&self, q: &RegressionQuery) -> BoxDelta;
}

impl<R: Regressor + ?Sized> Regressor for Arc<R> {
    fn predict(&self, q: &RegressionQuery) -> BoxDelta {
        (**self).predict(q)
    }
}

impl<R: Regressor + ?Sized> Regressor for Box<R> {
    fn predict(&self, q: &RegressionQuery) -> BoxDelta {
        (**self).predict(q)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRegressor;

impl Regressor for IdentityRegressor {
    fn predict(&self, _q: &RegressionQuery) -> BoxDelta {
        BoxDelta::ZERO
    }
}

/// `delta = W f + b`. Degenerate feature vectors predict no movement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRegressor {
    pub weights: [[f64; FEATURE_LEN]; 4],
    pub bias: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsDoc {
    feature_version: String,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearRegressor {
    pub fn zeros() -> Self {
        LinearRegressor {
            weights: [[0.0; FEATURE_LEN]; 4],
            bias: [0.0; 4],
        }
    }

    pub fn apply(&self, f: &[f64; FEATURE_LEN]) -> [f64; 4] {
        let mut out = self.bias;
        for (o, row) in out.iter_mut().zip(&self.weights) {
            *o += row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>();
        }
        out
    }

    pub fn to_json(&self) -> String {
        let doc = WeightsDoc {
            feature_version: FEATURE_VERSION.to_string(),
            weights: self.weights.iter().map(|r| r.to_vec()).collect(),
            bias: self.bias.to_vec(),
        };
        serde_json::to_string_pretty(&doc).expect("weights serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: WeightsDoc =
            serde_json::from_str(text).map_err(|e| Error::parse("regressor weights", e))?;
        if doc.feature_version != FEATURE_VERSION {
            return Err(Error::config(format!(
                "weights were trained for features '{}', expected '{FEATURE_VERSION}'",
                doc.feature_version
            )));
        }
        if doc.weights.len() != 4
            || doc.weights.iter().any(|r| r.len() != FEATURE_LEN)
            || doc.bias.len() != 4
        {
            return Err(Error::config(format!(
                "weights must be 4x{FEATURE_LEN} with a 4-vector bias"
            )));
        }
        let mut reg = LinearRegressor::zeros();
        for (dst, src) in reg.weights.iter_mut().zip(&doc.weights) {
            dst.copy_from_slice(src);
        }
        reg.bias.copy_from_slice(&doc.bias);
        if reg.bias.iter().chain(reg.weights.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::config("weights contain non-finite values"));
        }
        Ok(reg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl Regressor for LinearRegressor {
    fn predict(&self, q: &RegressionQuery) -> BoxDelta {
        if q.features.degenerate {
            return BoxDelta::ZERO;
        }
        BoxDelta::from_array(self.apply(&q.features.values))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// Movement of the best-overlapping object between `t_from` and `t_to`.
    Motion,
    /// Offset from the query box to the best-overlapping object at `t_to`.
    Offset,
}

/// Cheats with ground truth. With `sigma = 0` it is exact; otherwise each
/// component gets Gaussian noise seeded by `seed` and the query.
#[derive(Debug, Clone)]
pub struct OracleRegressor {
    gt: Arc<Vec<GroundTruthFrame>>,
    mode: OracleMode,
    sigma: f64,
    seed: u64,
}

pub(crate) fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

impl OracleRegressor {
    pub fn new(gt: Arc<Vec<GroundTruthFrame>>, mode: OracleMode, sigma: f64, seed: u64) -> Self {
        OracleRegressor {
            gt,
            mode,
            sigma,
            seed,
        }
    }

    fn best(&self, t: u32, b: &BBox, class_id: u32) -> Option<&crate::synth::GtBox> {
        let frame = self.gt.get(t as usize)?;
        frame
            .boxes
            .iter()
            .filter(|g| g.class_id == class_id)
            .map(|g| (iou(&g.bbox, b), g))
            .filter(|(o, _)| *o > 0.0)
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, g)| g)
    }

    fn exact(&self, q: &RegressionQuery) -> BoxDelta {
        let native = q.roi.scaled(1.0 / q.scale);
        match self.mode {
            OracleMode::Motion => {
                let Some(from) = self.best(q.t_from, &native, q.class_id) else {
                    return BoxDelta::ZERO;
                };
                match self.gt.get(q.t_to as usize).and_then(|f| f.find(from.object_id)) {
                    Some(to) => encode_delta(&from.bbox, &to.bbox),
                    None => BoxDelta::ZERO,
                }
            }
            OracleMode::Offset => match self.best(q.t_to, &native, q.class_id) {
                Some(g) => encode_delta(&native, &g.bbox),
                None => BoxDelta::ZERO,
            },
        }
    }
}

impl Regressor for OracleRegressor {
    fn predict(&self, q: &RegressionQuery) -> BoxDelta {
        let d = self.exact(q);
        if self.sigma <= 0.0 {
            return d;
        }
        let mut h = mix(self.seed, ((q.t_from as u64) << 32) | q.t_to as u64);
        for v in [q.roi.x, q.roi.y, q.roi.w, q.roi.h, q.scale] {
            h = mix(h, v.to_bits());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let n = Normal::new(0.0, self.sigma).expect("positive sigma");
        let a = d.to_array();
        BoxDelta::from_array([
            a[0] + n.sample(&mut rng),
            a[1] + n.sample(&mut rng),
            a[2] + n.sample(&mut rng),
            a[3] + n.sample(&mut rng),
        ])
    }
}
