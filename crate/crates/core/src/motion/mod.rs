//! Grayscale rasters, motion history images and the pooled box features that
//! feed the propagation and refinement regressors.

mod features;
pub mod pgm;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{
    appearance_features, motion_features, roi_motion_features, FeatureVec, FEATURE_LEN,
    FEATURE_NAMES,
};

/// Row-major 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("raster dimensions must be non-zero"));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "raster {}x{} needs {} pixels, got {}",
                width,
                height,
                width as usize * height as usize,
                pixels.len()
            )));
        }
        Ok(GrayFrame {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        GrayFrame {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = v;
    }

    pub fn same_dims(&self, other: &GrayFrame) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Area-averaged resampling by `scale` (output size rounded, at least 1).
    pub fn resample(&self, scale: f64) -> GrayFrame {
        if (scale - 1.0).abs() < 1e-12 {
            return self.clone();
        }
        let out_w = ((self.width as f64 * scale).round() as u32).max(1);
        let out_h = ((self.height as f64 * scale).round() as u32).max(1);
        let xw = axis_weights(self.width, out_w);
        let yw = axis_weights(self.height, out_h);
        let mut pixels = Vec::with_capacity(out_w as usize * out_h as usize);
        for ys in &yw {
            for xs in &xw {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for &(sy, wy) in ys {
                    let row = sy as usize * self.width as usize;
                    for &(sx, wx) in xs {
                        let w = wx * wy;
                        acc += w * self.pixels[row + sx as usize] as f64;
                        norm += w;
                    }
                }
                pixels.push((acc / norm).round().clamp(0.0, 255.0) as u8);
            }
        }
        GrayFrame {
            width: out_w,
            height: out_h,
            pixels,
        }
    }
}

/// For each output cell, the source indices it covers and their overlap.
fn axis_weights(src_len: u32, out_len: u32) -> Vec<Vec<(u32, f64)>> {
    let ratio = src_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let lo = i as f64 * ratio;
            let hi = (i as f64 + 1.0) * ratio;
            let mut cells = Vec::new();
            let mut s = lo.floor() as u32;
            while (s as f64) < hi && s < src_len {
                let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    cells.push((s, overlap));
                }
                s += 1;
            }
            cells
        })
        .collect()
}

/// Converts a 1-channel or interleaved 3-channel RGB raster to luma using
/// 0.299 R + 0.587 G + 0.114 B, rounded.
pub fn to_gray(width: u32, height: u32, channels: u8, data: &[u8]) -> Result<GrayFrame> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("raster dimensions must be non-zero"));
    }
    match channels {
        1 => GrayFrame::new(width, height, data.to_vec()),
        3 => {
            let n = width as usize * height as usize;
            if data.len() != 3 * n {
                return Err(Error::invalid(format!(
                    "RGB raster needs {} bytes, got {}",
                    3 * n,
                    data.len()
                )));
            }
            let pixels = data
                .chunks_exact(3)
                .map(|p| {
                    let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                    y.round().clamp(0.0, 255.0) as u8
                })
                .collect();
            GrayFrame::new(width, height, pixels)
        }
        c => Err(Error::invalid(format!("unsupported channel count {c}"))),
    }
}

/// Motion history parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhiParams {
    /// Absolute intensity change that marks a pixel as moving.
    pub diff_thresh: u8,
    /// Per-step fade; `None` picks `round(255 / (pairs - 1))`.
    pub decay: Option<u8>,
}

impl Default for MhiParams {
    fn default() -> Self {
        MhiParams {
            diff_thresh: 16,
            decay: None,
        }
    }
}

/// Decay that fades the oldest change to roughly zero over `pairs` steps.
pub fn default_decay(pairs: usize) -> u8 {
    if pairs <= 1 {
        255
    } else {
        (255.0 / (pairs - 1) as f64).round() as u8
    }
}

/// Motion history image over consecutive frame pairs, in the given order.
///
/// Per pixel, starting from 0: a change of at least `diff_thresh` sets the
/// value to 255, otherwise it fades by `decay` (saturating at 0).
pub fn compute_mhi(frames: &[&GrayFrame], diff_thresh: u8, decay: u8) -> Result<GrayFrame> {
    if frames.len() < 2 {
        return Err(Error::invalid("motion history needs at least two frames"));
    }
    let first = frames[0];
    if let Some(bad) = frames.iter().find(|f| !f.same_dims(first)) {
        return Err(Error::invalid(format!(
            "frame size mismatch: {}x{} vs {}x{}",
            bad.width, bad.height, first.width, first.height
        )));
    }
    let mut mhi = vec![0u8; first.pixels.len()];
    for pair in frames.windows(2) {
        let (prev, next) = (&pair[0].pixels, &pair[1].pixels);
        for ((h, &a), &b) in mhi.iter_mut().zip(prev).zip(next) {
            *h = if a.abs_diff(b) >= diff_thresh {
                255
            } else {
                h.saturating_sub(decay)
            };
        }
    }
    GrayFrame::new(first.width, first.height, mhi)
}

/// Motion representation between two time points: the history raster plus
/// both endpoint frames. Propagation runs from `t_start` toward `t_end`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionRep {
    pub mhi: GrayFrame,
    pub gray_start: GrayFrame,
    pub gray_end: GrayFrame,
    pub t_start: u32,
    pub t_end: u32,
}

impl MotionRep {
    pub fn is_forward(&self) -> bool {
        self.t_end > self.t_start
    }
}

/// Frame indices entering the recurrence, in propagation order: both
/// endpoints plus at most `max_samples` uniformly spaced interior frames.
pub fn sample_indices(t_start: u32, t_end: u32, max_samples: u32) -> Vec<u32> {
    let span = t_start.abs_diff(t_end);
    let interior = span.saturating_sub(1);
    let forward = t_end >= t_start;
    let step = |off: u32| if forward { t_start + off } else { t_start - off };
    let mut out = vec![t_start];
    if interior <= max_samples {
        out.extend((1..span).map(step));
    } else {
        let k = max_samples as u64;
        out.extend((1..=k).map(|i| step((i * span as u64 / (k + 1)) as u32)));
    }
    out.push(t_end);
    out
}

/// Builds `M_{start -> end}` from a frame sequence.
pub fn build_motion_rep(
    frames: &[GrayFrame],
    t_start: u32,
    t_end: u32,
    max_samples: u32,
    params: MhiParams,
) -> Result<MotionRep> {
    let n = frames.len() as u32;
    if t_start >= n || t_end >= n {
        return Err(Error::invalid(format!(
            "frame index out of range: {t_start} -> {t_end} with {n} frames"
        )));
    }
    if t_start == t_end {
        return Err(Error::invalid("motion endpoints must differ"));
    }
    let idx = sample_indices(t_start, t_end, max_samples);
    let seq: Vec<&GrayFrame> = idx.iter().map(|&i| &frames[i as usize]).collect();
    let decay = params.decay.unwrap_or_else(|| default_decay(seq.len() - 1));
    let mhi = compute_mhi(&seq, params.diff_thresh, decay)?;
    Ok(MotionRep {
        mhi,
        gray_start: frames[t_start as usize].clone(),
        gray_end: frames[t_end as usize].clone(),
        t_start,
        t_end,
    })
}
