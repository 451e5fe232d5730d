use crate::error::{Error, Result};
use crate::geom::{greedy_match, BBox, Detection, MATCH_IOU_FLOOR};

/// An interpolated detection and the endpoint boxes it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpBox {
    pub det: Detection,
    pub left: Option<usize>,
    pub right: Option<usize>,
}

fn lerp(p: f64, q: f64, f: f64) -> f64 {
    p + (q - p) * f
}

/// Interpolates at `t_query` given explicit `(left, right)` pairs.
///
/// Paired boxes blend center, size and score by the temporal fraction.
/// Unpaired boxes stay where they are, with their score fading linearly to
/// zero at the opposite endpoint. Output order: pairs as given, then the
/// unpaired left boxes, then the unpaired right boxes.
pub fn interpolate_pairs(
    a: &[Detection],
    b: &[Detection],
    pairs: &[(usize, usize)],
    t_a: u32,
    t_b: u32,
    t_query: u32,
) -> Result<Vec<InterpBox>> {
    if !(t_a < t_query && t_query < t_b) {
        return Err(Error::invalid(format!(
            "query {t_query} must lie strictly inside ({t_a}, {t_b})"
        )));
    }
    let f = (t_query - t_a) as f64 / (t_b - t_a) as f64;
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::with_capacity(a.len().max(b.len()));
    for &(i, j) in pairs {
        let (p, q) = (&a[i], &b[j]);
        used_a[i] = true;
        used_b[j] = true;
        let bbox = BBox::new(
            lerp(p.bbox.x, q.bbox.x, f),
            lerp(p.bbox.y, q.bbox.y, f),
            lerp(p.bbox.w, q.bbox.w, f),
            lerp(p.bbox.h, q.bbox.h, f),
        );
        out.push(InterpBox {
            det: Detection::new(bbox, p.class_id, lerp(p.score, q.score, f)),
            left: Some(i),
            right: Some(j),
        });
    }
    for (i, d) in a.iter().enumerate().filter(|(i, _)| !used_a[*i]) {
        out.push(InterpBox {
            det: Detection::new(d.bbox, d.class_id, d.score * (1.0 - f)),
            left: Some(i),
            right: None,
        });
    }
    for (j, d) in b.iter().enumerate().filter(|(j, _)| !used_b[*j]) {
        out.push(InterpBox {
            det: Detection::new(d.bbox, d.class_id, d.score * f),
            left: None,
            right: Some(j),
        });
    }
    Ok(out)
}

/// Linear interpolation between two key frames with greedy IoU matching
/// (same class, IoU at least 0.3, any score).
pub fn interpolate(
    a: &[Detection],
    b: &[Detection],
    t_a: u32,
    t_b: u32,
    t_query: u32,
) -> Result<Vec<Detection>> {
    let pairs = greedy_match(a, b, 0.0, MATCH_IOU_FLOOR);
    Ok(interpolate_pairs(a, b, &pairs, t_a, t_b, t_query)?
        .into_iter()
        .map(|x| x.det)
        .collect())
}
