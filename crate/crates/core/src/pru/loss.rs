use crate::error::{Error, Result};
use crate::geom::BoxDelta;

/// Huber-style smooth L1: `0.5 x^2 / beta` inside `|x| < beta`, else
/// `|x| - 0.5 beta`.
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

/// Derivative of [`smooth_l1`] with respect to `x`.
pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Mean smooth L1 over the four delta components.
pub fn delta_loss(pred: &BoxDelta, target: &BoxDelta, beta: f64) -> f64 {
    let p = pred.to_array();
    let t = target.to_array();
    p.iter().zip(&t).map(|(a, b)| smooth_l1(a - b, beta)).sum::<f64>() / 4.0
}

/// Two-branch multi-task loss: mean propagation loss plus `lambda` times the
/// mean refinement loss, each averaged over the batch and over the four
/// delta components.
pub fn joint_loss(
    pred_t: &[BoxDelta],
    target_t: &[BoxDelta],
    pred_s: &[BoxDelta],
    target_s: &[BoxDelta],
    lambda: f64,
    beta: f64,
) -> Result<f64> {
    if pred_t.is_empty() {
        return Err(Error::invalid("joint loss needs a non-empty batch"));
    }
    if pred_t.len() != target_t.len() || pred_s.len() != target_s.len() {
        return Err(Error::invalid("prediction/target lengths differ"));
    }
    if !pred_s.is_empty() && pred_s.len() != pred_t.len() {
        return Err(Error::invalid("branches must share the batch size"));
    }
    let n = pred_t.len() as f64;
    let lt: f64 = pred_t
        .iter()
        .zip(target_t)
        .map(|(p, t)| delta_loss(p, t, beta))
        .sum::<f64>()
        / n;
    let ls: f64 = pred_s
        .iter()
        .zip(target_s)
        .map(|(p, t)| delta_loss(p, t, beta))
        .sum::<f64>()
        / n;
    Ok(lt + lambda * ls)
}
