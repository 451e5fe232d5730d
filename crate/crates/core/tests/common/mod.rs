//! Test helpers shared by several test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stlattice::geom::{iou, BBox, Detection};
use stlattice::synth::{GroundTruthFrame, GtBox};

/// Reference AP written from the definitions, without sharing code with the
/// library: every ranked prefix is matched from scratch, then the
/// interpolated precision `max{P_k : R_k >= r}` is integrated over the
/// distinct recall levels.
pub fn brute_force_ap(dets: &[Vec<Detection>], gt: &[GroundTruthFrame], class_id: u32, thresh: f64) -> Option<f64> {
    let n_pos = gt.iter().flat_map(|f| &f.boxes).filter(|g| g.class_id == class_id).count();
    if n_pos == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (t, ds) in dets.iter().enumerate() {
        for (i, d) in ds.iter().enumerate() {
            if d.class_id == class_id {
                ranked.push((d.score, t, i));
            }
        }
    }
    // score descending, ties by frame then index
    for a in 0..ranked.len() {
        for b in a + 1..ranked.len() {
            let (x, y) = (ranked[a], ranked[b]);
            if y.0 > x.0 || (y.0 == x.0 && (y.1, y.2) < (x.1, x.2)) {
                ranked.swap(a, b);
            }
        }
    }
    let tp_of_prefix = |k: usize| -> usize {
        let mut taken = vec![];
        let mut tp = 0;
        for &(_, t, i) in &ranked[..k] {
            let d = &dets[t][i];
            let mut best = None;
            let mut best_iou = -1.0;
            for (j, g) in gt[t].boxes.iter().enumerate() {
                let o = iou(&d.bbox, &g.bbox);
                if g.class_id == class_id && o >= thresh && !taken.contains(&(t, j)) && o > best_iou {
                    best = Some(j);
                    best_iou = o;
                }
            }
            if let Some(j) = best {
                taken.push((t, j));
                tp += 1;
            }
        }
        tp
    };
    let points: Vec<(f64, f64)> = (1..=ranked.len())
        .map(|k| {
            let tp = tp_of_prefix(k) as f64;
            (tp / n_pos as f64, tp / k as f64)
        })
        .collect();
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

pub fn jitter(rng: &mut ChaCha8Rng, b: &BBox, amount: f64) -> BBox {
    BBox::new(
        b.x + rng.gen_range(-amount..amount) * b.w,
        b.y + rng.gen_range(-amount..amount) * b.h,
        b.w * rng.gen_range(1.0 - amount..1.0 + amount),
        b.h * rng.gen_range(1.0 - amount..1.0 + amount),
    )
}

/// Up to 10 frames, up to 20 detections, 3 classes. Scores come from a
/// coarse grid half of the time so that ties occur.
pub fn instance(seed: u64) -> (Vec<Vec<Detection>>, Vec<GroundTruthFrame>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_frames = rng.gen_range(1..=10);
    let gt: Vec<GroundTruthFrame> = (0..n_frames)
        .map(|t| GroundTruthFrame {
            frame: t as u32,
            boxes: (0..rng.gen_range(0..4))
                .map(|k| GtBox {
                    bbox: BBox::new(rng.gen_range(0.0..80.0), rng.gen_range(0.0..80.0), rng.gen_range(8.0..30.0), rng.gen_range(8.0..30.0)),
                    class_id: rng.gen_range(0..3),
                    object_id: k,
                })
                .collect(),
        })
        .collect();
    let mut dets = vec![Vec::new(); n_frames];
    let coarse = rng.gen_bool(0.5);
    for _ in 0..rng.gen_range(0..=20) {
        let t = rng.gen_range(0..n_frames);
        let score = if coarse { rng.gen_range(1..5) as f64 / 5.0 } else { rng.gen_range(0.0..1.0) };
        let d = match gt[t].boxes.len() {
            n if n > 0 && rng.gen_bool(0.7) => {
                let g = gt[t].boxes[rng.gen_range(0..n)];
                let class_id = if rng.gen_bool(0.85) { g.class_id } else { rng.gen_range(0..3) };
                Detection::new(jitter(&mut rng, &g.bbox, 0.25), class_id, score)
            }
            _ => Detection::new(
                BBox::new(rng.gen_range(0.0..80.0), rng.gen_range(0.0..80.0), rng.gen_range(8.0..30.0), rng.gen_range(8.0..30.0)),
                rng.gen_range(0..3),
                score,
            ),
        };
        dets[t].push(d);
    }
    (dets, gt)
}
