use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{greedy_match, iou, Detection};
use crate::synth::Detector;

/// `0, interval, 2 interval, ...` plus the last frame.
pub fn select_uniform(n_frames: u32, interval: u32) -> Result<Vec<u32>> {
    if interval == 0 {
        return Err(Error::invalid("key frame interval must be at least 1"));
    }
    if n_frames == 0 {
        return Ok(Vec::new());
    }
    let mut out: Vec<u32> = (0..n_frames).step_by(interval as usize).collect();
    if *out.last().expect("non-empty") != n_frames - 1 {
        out.push(n_frames - 1);
    }
    Ok(out)
}

/// `count` frames spread as evenly as possible over the clip, always
/// including the first and the last.
pub fn select_uniform_count(n_frames: u32, count: usize) -> Result<Vec<u32>> {
    if n_frames == 0 {
        return Ok(Vec::new());
    }
    if count < 2 || count > n_frames as usize {
        return Err(Error::invalid(format!(
            "cannot place {count} key frames in {n_frames} frames"
        )));
    }
    let span = (n_frames - 1) as u64;
    let k = (count - 1) as u64;
    // round(i * span / k) in integers
    Ok((0..=k).map(|i| ((2 * i * span + k) / (2 * k)) as u32).collect())
}

/// Average of `0.5 (sqrt(area_a) + sqrt(area_b)) * IoU` over confidently
/// matched pairs. Large, slowly moving objects are easy; no match is the
/// hardest case and scores 0.
pub fn easiness(a: &[Detection], b: &[Detection], score_floor: f64, iou_floor: f64) -> f64 {
    let pairs = greedy_match(a, b, score_floor, iou_floor);
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|&(i, j)| {
            let (p, q) = (&a[i].bbox, &b[j].bbox);
            0.5 * (p.area().sqrt() + q.area().sqrt()) * iou(p, q)
        })
        .sum::<f64>()
        / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EasinessParams {
    pub score_floor: f64,
    pub iou_floor: f64,
}

impl Default for EasinessParams {
    fn default() -> Self {
        EasinessParams {
            score_floor: crate::geom::MATCH_SCORE_FLOOR,
            iou_floor: crate::geom::MATCH_IOU_FLOOR,
        }
    }
}

/// Key frames with their detector output (native coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeSelection {
    pub keyframes: Vec<u32>,
    pub dets: BTreeMap<u32, Vec<Detection>>,
    /// Easiness of each original coarse pair `(a, b, e)`.
    pub easiness: Vec<(u32, u32, f64)>,
    /// Frames added between hard pairs.
    pub inserted: Vec<u32>,
    pub detector_ms: f64,
}

fn run_detector(det: &dyn Detector, frames: &[u32]) -> Result<BTreeMap<u32, Vec<Detection>>> {
    frames
        .par_iter()
        .map(|&t| det.detect(t).map(|d| (t, d)))
        .collect()
}

/// Detects on a fixed frame list.
pub fn detect_keyframes(det: &dyn Detector, keyframes: &[u32]) -> Result<KeyframeSelection> {
    let dets = run_detector(det, keyframes)?;
    Ok(KeyframeSelection {
        keyframes: keyframes.to_vec(),
        dets,
        easiness: Vec::new(),
        inserted: Vec::new(),
        detector_ms: det.latency_ms() * keyframes.len() as f64,
    })
}

/// Uniform coarse key frames, then one pass that adds the midpoint of every
/// adjacent pair whose easiness falls below `threshold`.
pub fn select_adaptive(
    det: &dyn Detector,
    n_frames: u32,
    coarse_interval: u32,
    threshold: f64,
    params: EasinessParams,
) -> Result<KeyframeSelection> {
    if coarse_interval < 2 {
        return Err(Error::invalid("adaptive selection needs a coarse interval of at least 2"));
    }
    let coarse = select_uniform(n_frames, coarse_interval)?;
    let mut dets = run_detector(det, &coarse)?;
    let mut scores = Vec::new();
    let mut inserted = Vec::new();
    for w in coarse.windows(2) {
        let (a, b) = (w[0], w[1]);
        let e = easiness(&dets[&a], &dets[&b], params.score_floor, params.iou_floor);
        scores.push((a, b, e));
        if e < threshold && b - a >= 2 {
            inserted.push((a + b) / 2);
        }
    }
    dets.extend(run_detector(det, &inserted)?);
    let keyframes: Vec<u32> = dets.keys().copied().collect();
    Ok(KeyframeSelection {
        detector_ms: det.latency_ms() * keyframes.len() as f64,
        keyframes,
        dets,
        easiness: scores,
        inserted,
    })
}

/// Easiness of every adjacent coarse pair, for threshold calibration.
pub fn pair_easiness(
    det: &dyn Detector,
    n_frames: u32,
    coarse_interval: u32,
    params: EasinessParams,
) -> Result<Vec<f64>> {
    let coarse = select_uniform(n_frames, coarse_interval)?;
    let dets = run_detector(det, &coarse)?;
    Ok(coarse
        .windows(2)
        .map(|w| easiness(&dets[&w[0]], &dets[&w[1]], params.score_floor, params.iou_floor))
        .collect())
}

/// Nearest-rank percentile (`q` in `[0, 1]`) of a non-empty sample.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty sample"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize).max(1);
    Ok(v[rank - 1])
}

/// Threshold that flags, under `e < threshold`, every value at or below the
/// `q` percentile: halfway to the next larger value, ties included.
pub fn insertion_threshold(values: &[f64], q: f64) -> Result<f64> {
    let p = percentile(values, q)?;
    let next = values.iter().copied().filter(|&v| v > p).min_by(f64::total_cmp);
    Ok(match next {
        Some(n) => 0.5 * (p + n),
        None => p + p.abs().max(1.0) * 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BBox;

    #[test]
    fn insertion_threshold_includes_ties() {
        let v = [0.0, 0.0, 0.0, 5.0, 7.0, 9.0, 11.0, 13.0];
        assert_eq!(percentile(&v, 0.25).unwrap(), 0.0);
        let t = insertion_threshold(&v, 0.25).unwrap();
        assert_eq!(t, 2.5);
        assert_eq!(v.iter().filter(|&&e| e < t).count(), 3);
        let t = insertion_threshold(&[4.0, 4.0], 0.5).unwrap();
        assert!(t > 4.0 && t < 4.001);
        assert!(insertion_threshold(&[], 0.5).is_err());
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(select_uniform(25, 24).unwrap(), vec![0, 24]);
        assert_eq!(select_uniform(25, 12).unwrap(), vec![0, 12, 24]);
        assert_eq!(select_uniform(5, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_uniform(10, 4).unwrap(), vec![0, 4, 8, 9]);
        assert!(select_uniform(10, 0).is_err());
    }

    #[test]
    fn uniform_count_matches_interval_when_it_divides() {
        assert_eq!(select_uniform_count(193, 9).unwrap(), select_uniform(193, 24).unwrap());
        assert_eq!(select_uniform_count(25, 2).unwrap(), vec![0, 24]);
        let k = select_uniform_count(100, 7).unwrap();
        assert_eq!(k.len(), 7);
        assert!(k.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*k.last().unwrap(), 99);
        assert!(select_uniform_count(5, 6).is_err());
    }

    #[test]
    fn easiness_examples() {
        let d = |x: f64, s: f64| Detection::new(BBox::new(x, 0.0, 10.0, 10.0), 0, s);
        // IoU 0.5 needs overlap 2/3 of the width
        let a = [d(0.0, 0.9)];
        let b = [d(10.0 / 3.0, 0.9)];
        assert!((easiness(&a, &b, 0.8, 0.3) - 5.0).abs() < 1e-9);
        assert!((easiness(&a, &a, 0.8, 0.3) - 10.0).abs() < 1e-12);
        assert_eq!(easiness(&[d(0.0, 0.5)], &[d(0.0, 0.5)], 0.8, 0.3), 0.0);
        assert_eq!(easiness(&[], &a, 0.8, 0.3), 0.0);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 0.25).unwrap(), 1.0);
        assert_eq!(percentile(&v, 0.5).unwrap(), 2.0);
        assert_eq!(percentile(&v, 1.0).unwrap(), 4.0);
        assert!(percentile(&[], 0.5).is_err());
    }
}
