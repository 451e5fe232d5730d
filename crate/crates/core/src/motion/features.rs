use crate::geom::BBox;

use super::{GrayFrame, MotionRep};

/// Length of every pooled feature vector.
pub const FEATURE_LEN: usize = 11;

/// Feature layout, in order.
pub const FEATURE_NAMES: [&str; FEATURE_LEN] = [
    "centroid_dx",
    "centroid_dy",
    "mean_mass",
    "moment_xx",
    "moment_yy",
    "moment_xy",
    "aux_mean",
    "log_w",
    "log_h",
    "recent_dx",
    "recent_dy",
];

/// Endpoint difference that lets the motion region grow through faded pixels.
const BRIDGE_DIFF: u8 = 16;

/// Enlargement of the box that seeds the pooled motion region when the
/// object cannot be found in the start frame.
const SEED_EXPAND: f64 = 1.5;

/// Fixed-length box descriptor pooled from an expanded window around a box.
///
/// 0-1: mass centroid offset from the box center, in box widths/heights.
/// 2: mean raster mass in the window, divided by 255.
/// 3-5: mass-weighted central second moments, normalized by the box size.
/// 6: auxiliary mean (endpoint difference for motion, box contrast for
///    appearance), divided by 255.
/// 7-8: log box width and height.
/// 9-10: unweighted centroid offset of the "recent" part of the pooled
///    region, in box widths/heights. For motion that is the latest step,
///    scaled by its pixel count over the box area (capped at one); for
///    appearance the object mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVec {
    pub values: [f64; FEATURE_LEN],
    /// Set when the window falls entirely outside the raster.
    pub degenerate: bool,
}

impl FeatureVec {
    pub fn zeros() -> Self {
        FeatureVec {
            values: [0.0; FEATURE_LEN],
            degenerate: true,
        }
    }
}

/// Pixel range `[x0, x1) x [y0, y1)` whose centers fall inside `b`, clipped.
fn pixel_window(b: &BBox, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
    let (bx0, by0, bx1, by1) = b.corners();
    let x0 = (bx0 - 0.5).ceil().max(0.0);
    let y0 = (by0 - 0.5).ceil().max(0.0);
    let x1 = ((bx1 - 0.5).floor() + 1.0).min(width as f64);
    let y1 = ((by1 - 0.5).floor() + 1.0).min(height as f64);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    Some((x0 as u32, y0 as u32, x1 as u32, y1 as u32))
}

fn rect_mask(window: (u32, u32, u32, u32), rect: Option<(u32, u32, u32, u32)>) -> Vec<bool> {
    let (x0, y0, x1, y1) = window;
    let ww = (x1 - x0) as usize;
    let mut mask = vec![false; ww * (y1 - y0) as usize];
    if let Some((sx0, sy0, sx1, sy1)) = rect {
        for y in sy0.max(y0)..sy1.min(y1) {
            for x in sx0.max(x0)..sx1.min(x1) {
                mask[(y - y0) as usize * ww + (x - x0) as usize] = true;
            }
        }
    }
    mask
}

/// `mask` grown by one pixel in all eight directions.
fn dilate(window: (u32, u32, u32, u32), mask: &[bool]) -> Vec<bool> {
    let (x0, y0, x1, y1) = window;
    let ww = (x1 - x0) as i64;
    let wh = (y1 - y0) as i64;
    let mut out = mask.to_vec();
    for y in 0..wh {
        for x in 0..ww {
            if !mask[(y * ww + x) as usize] {
                continue;
            }
            for ny in (y - 1).max(0)..=(y + 1).min(wh - 1) {
                for nx in (x - 1).max(0)..=(x + 1).min(ww - 1) {
                    out[(ny * ww + nx) as usize] = true;
                }
            }
        }
    }
    out
}

/// Pixels of `window` with positive weight that are 4-connected, through
/// positive-weight pixels, to a positive-weight pixel flagged in `seed`.
/// Masks are row-major over the window.
fn connected_region<F>(window: (u32, u32, u32, u32), seed: &[bool], weight: &F) -> Vec<bool>
where
    F: Fn(u32, u32) -> f64,
{
    let (x0, y0, x1, y1) = window;
    let ww = (x1 - x0) as usize;
    let mut mask = vec![false; seed.len()];
    let mut stack = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let i = (y - y0) as usize * ww + (x - x0) as usize;
            if seed[i] && weight(x, y) > 0.0 {
                mask[i] = true;
                stack.push((x, y));
            }
        }
    }
    while let Some((x, y)) = stack.pop() {
        let around = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in around {
            if nx < x0 || nx >= x1 || ny < y0 || ny >= y1 {
                continue;
            }
            let i = (ny - y0) as usize * ww + (nx - x0) as usize;
            if !mask[i] && weight(nx, ny) > 0.0 {
                mask[i] = true;
                stack.push((nx, ny));
            }
        }
    }
    mask
}

/// Mean of the window's border pixels.
fn border_mean(frame: &GrayFrame, window: (u32, u32, u32, u32)) -> f64 {
    let (x0, y0, x1, y1) = window;
    let mut sum = 0.0;
    let mut n = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            if x == x0 || y == y0 || x + 1 == x1 || y + 1 == y1 {
                sum += frame.get(x, y) as f64;
                n += 1.0;
            }
        }
    }
    sum / n
}

/// Pixels contrasting with the local background by at least half the peak
/// contrast found inside `roi`, connected to `roi`. `None` when the box has
/// no contrast at all.
fn object_mask(frame: &GrayFrame, window: (u32, u32, u32, u32), roi: &BBox) -> Option<Vec<bool>> {
    let inner = pixel_window(roi, frame.width, frame.height)?;
    let bg = border_mean(frame, window);
    let contrast = |x: u32, y: u32| (frame.get(x, y) as f64 - bg).abs();
    let (a0, b0, a1, b1) = inner;
    let mut peak: f64 = 0.0;
    for y in b0..b1 {
        for x in a0..a1 {
            peak = peak.max(contrast(x, y));
        }
    }
    if peak <= 0.0 {
        return None;
    }
    let strong = |x: u32, y: u32| if contrast(x, y) >= 0.5 * peak { 1.0 } else { 0.0 };
    Some(connected_region(window, &rect_mask(window, Some(inner)), &strong))
}

/// Mass statistics of `weight` over a window, relative to `roi`. With a
/// mask, only the flagged pixels count.
fn pool<F>(window: (u32, u32, u32, u32), roi: &BBox, weight: F, mask: Option<&[bool]>) -> [f64; 6]
where
    F: Fn(u32, u32) -> f64,
{
    let (x0, y0, x1, y1) = window;
    let ww = (x1 - x0) as usize;
    let mut mass = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for y in y0..y1 {
        let py = y as f64 + 0.5 - roi.y;
        for x in x0..x1 {
            if mask.is_some_and(|m| !m[(y - y0) as usize * ww + (x - x0) as usize]) {
                continue;
            }
            let w = weight(x, y);
            if w == 0.0 {
                continue;
            }
            let px = x as f64 + 0.5 - roi.x;
            mass += w;
            sx += w * px;
            sy += w * py;
            sxx += w * px * px;
            syy += w * py * py;
            sxy += w * px * py;
        }
    }
    let count = ((x1 - x0) * (y1 - y0)) as f64;
    if mass <= 0.0 {
        return [0.0; 6];
    }
    let cx = sx / mass;
    let cy = sy / mass;
    let vxx = (sxx / mass - cx * cx).max(0.0);
    let vyy = (syy / mass - cy * cy).max(0.0);
    let vxy = sxy / mass - cx * cy;
    [
        cx / roi.w,
        cy / roi.h,
        mass / count / 255.0,
        vxx / (roi.w * roi.w),
        vyy / (roi.h * roi.h),
        vxy / (roi.w * roi.h),
    ]
}

/// Plain centroid of the pixels of `window` selected by `keep`, relative to
/// `roi` in box units; zero when nothing is selected.
fn centroid<P>(window: (u32, u32, u32, u32), roi: &BBox, keep: P) -> [f64; 2]
where
    P: Fn(u32, u32, usize) -> bool,
{
    let (x0, y0, x1, y1) = window;
    let ww = (x1 - x0) as usize;
    let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in y0..y1 {
        for x in x0..x1 {
            if keep(x, y, (y - y0) as usize * ww + (x - x0) as usize) {
                n += 1.0;
                sx += x as f64 + 0.5 - roi.x;
                sy += y as f64 + 0.5 - roi.y;
            }
        }
    }
    if n == 0.0 {
        return [0.0; 2];
    }
    [sx / n / roi.w, sy / n / roi.h]
}

/// [`centroid`] scaled by the selected pixel count over the box area,
/// capped at one, so a few flickering edge pixels barely register.
fn covered_centroid<P>(window: (u32, u32, u32, u32), roi: &BBox, keep: P) -> [f64; 2]
where
    P: Fn(u32, u32, usize) -> bool,
{
    let (x0, y0, x1, y1) = window;
    let ww = (x1 - x0) as usize;
    let mut n = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            if keep(x, y, (y - y0) as usize * ww + (x - x0) as usize) {
                n += 1.0;
            }
        }
    }
    let cover = (n / (roi.w * roi.h)).min(1.0);
    centroid(window, roi, keep).map(|c| c * cover)
}

fn assemble(stats: [f64; 6], aux: f64, recent: [f64; 2], roi: &BBox) -> FeatureVec {
    let mut values = [0.0; FEATURE_LEN];
    values[..6].copy_from_slice(&stats);
    values[6] = aux;
    values[7] = roi.w.ln();
    values[8] = roi.h.ln();
    values[9] = recent[0];
    values[10] = recent[1];
    FeatureVec {
        values,
        degenerate: false,
    }
}

/// Features of `roi` from a motion history raster, with the mean absolute
/// endpoint difference as the auxiliary channel. Coordinates are in the
/// raster's pixel space.
///
/// Only motion regions touching the object itself are pooled, so other
/// objects moving nearby do not pull the centroid. The object is the
/// strong-contrast blob of the start frame reaching into the box; when the
/// box has no contrast the box enlarged by half is used instead.
pub fn motion_features(
    mhi: &GrayFrame,
    start: &GrayFrame,
    end: &GrayFrame,
    roi: &BBox,
    expand: f64,
) -> FeatureVec {
    let Some(win) = pixel_window(&roi.expanded(expand), mhi.width, mhi.height) else {
        return FeatureVec::zeros();
    };
    let weight = |x: u32, y: u32| mhi.get(x, y) as f64;
    let seed = match object_mask(start, win, roi) {
        Some(obj) => dilate(win, &obj),
        None => rect_mask(win, pixel_window(&roi.expanded(SEED_EXPAND), mhi.width, mhi.height)),
    };
    // the oldest sampled step has faded to zero; endpoint change bridges it
    let moved = |x: u32, y: u32| {
        if mhi.get(x, y) > 0 || start.get(x, y).abs_diff(end.get(x, y)) >= BRIDGE_DIFF {
            1.0
        } else {
            0.0
        }
    };
    let region = connected_region(win, &seed, &moved);
    let stats = pool(win, roi, weight, Some(&region));
    let recent = covered_centroid(win, roi, |x, y, i| region[i] && mhi.get(x, y) == u8::MAX);
    let (x0, y0, x1, y1) = win;
    let mut diff = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            diff += start.get(x, y).abs_diff(end.get(x, y)) as f64;
        }
    }
    let count = ((x1 - x0) * (y1 - y0)) as f64;
    assemble(stats, diff / count / 255.0, recent, roi)
}

/// [`motion_features`] over a [`MotionRep`].
pub fn roi_motion_features(m: &MotionRep, roi: &BBox, expand: f64) -> FeatureVec {
    motion_features(&m.mhi, &m.gray_start, &m.gray_end, roi, expand)
}

/// Appearance features of `roi`: the same pooling applied to
/// `|frame - local background|`, where the background is the mean of the
/// window's border pixels. The auxiliary channel is the mean contrast inside
/// the box itself; the recent channels track the strong-contrast region
/// (at least half the peak inside the box) that reaches into the box.
pub fn appearance_features(frame: &GrayFrame, roi: &BBox, expand: f64) -> FeatureVec {
    let Some(win) = pixel_window(&roi.expanded(expand), frame.width, frame.height) else {
        return FeatureVec::zeros();
    };
    let bg = border_mean(frame, win);
    let contrast = |x: u32, y: u32| (frame.get(x, y) as f64 - bg).abs();
    let stats = pool(win, roi, contrast, None);
    let recent = match object_mask(frame, win, roi) {
        Some(mask) => centroid(win, roi, |_, _, i| mask[i]),
        None => [0.0; 2],
    };

    let aux = match pixel_window(roi, frame.width, frame.height) {
        Some((a0, b0, a1, b1)) => {
            let mut acc = 0.0;
            for y in b0..b1 {
                for x in a0..a1 {
                    acc += contrast(x, y);
                }
            }
            acc / ((a1 - a0) * (b1 - b0)) as f64 / 255.0
        }
        None => 0.0,
    };
    assemble(stats, aux, recent, roi)
}
