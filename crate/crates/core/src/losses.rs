//! Center-surround weighted cross-entropy, weighted IoU and their sum, with
//! analytic gradients with respect to the prediction.

use std::f64::consts::PI;

use thiserror::Error;

use crate::maps::{check_same_shape, BinaryMask, MapError, ScalarMap};

/// Default side length of the center-surround window.
pub const DEFAULT_WINDOW: usize = 31;

/// Predictions are clamped into `[CLAMP, 1 - CLAMP]` inside the logarithms.
pub const CLAMP: f64 = 1e-7;

/// Weights of the final, second and third supervised predictions.
pub const PREDICTION_WEIGHTS: [f64; 3] = [1.0, 0.5, 0.25];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("window must be odd and at least 3, got {0}")]
    Window(usize),
    #[error("total loss needs exactly {expected} predictions, got {found}")]
    PredictionCount { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, LossError>;

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(LossError::Window(window));
    }
    Ok(())
}

/// `window x window` ring kernel, row-major. The weight at squared distance
/// `d` from the centre is `(sin(pi d / A0 - pi / 2) + 1) / (2 n_d)`, where
/// `A0 = window^2` and `n_d` counts the positions sharing that distance.
/// The centre weight is zero.
pub fn ring_kernel(window: usize) -> Result<Vec<f64>> {
    check_window(window)?;
    let r = (window / 2) as i64;
    let a0 = (window * window) as f64;
    let max_d = (2 * r * r) as usize;
    let mut counts = vec![0usize; max_d + 1];
    for dy in -r..=r {
        for dx in -r..=r {
            counts[(dy * dy + dx * dx) as usize] += 1;
        }
    }
    let mut kernel = Vec::with_capacity(window * window);
    for dy in -r..=r {
        for dx in -r..=r {
            let d = (dy * dy + dx * dx) as usize;
            if d == 0 {
                kernel.push(0.0);
            } else {
                let w = ((PI * d as f64 / a0 - PI / 2.0).sin() + 1.0) / (2.0 * counts[d] as f64);
                kernel.push(w);
            }
        }
    }
    Ok(kernel)
}

/// Per-pixel weight `|sum(kernel * G) / A0 - G_i|`, zero padding at the border.
pub fn center_surround_weights(gt: &BinaryMask, window: usize) -> Result<Vec<f64>> {
    let kernel = ring_kernel(window)?;
    let (h, w) = (gt.height(), gt.width());
    let r = window / 2;
    let a0 = (window * window) as f64;
    // sum the kernel over foreground pixels only, scattering from each one
    let mut acc = vec![0.0f64; h * w];
    for sy in 0..h {
        for sx in 0..w {
            if !gt.at(sy, sx) {
                continue;
            }
            let y0 = sy.saturating_sub(r);
            let y1 = (sy + r).min(h - 1);
            let x0 = sx.saturating_sub(r);
            let x1 = (sx + r).min(w - 1);
            for y in y0..=y1 {
                let ky = y + r - sy;
                let krow = &kernel[ky * window..(ky + 1) * window];
                let row = &mut acc[y * w..(y + 1) * w];
                for x in x0..=x1 {
                    row[x] += krow[x + r - sx];
                }
            }
        }
    }
    Ok(acc
        .iter()
        .zip(gt.data())
        .map(|(&s, &g)| (s / a0 - if g { 1.0 } else { 0.0 }).abs())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_csbce: f64,
    pub l_wiou: f64,
    pub l_epa: f64,
    pub l_total: f64,
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(CLAMP, 1.0 - CLAMP)
}

fn cs_bce_with(pred: &ScalarMap, gt: &BinaryMask, weights: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&p, &g), &w) in pred.data().iter().zip(gt.data()).zip(weights) {
        let p = clamp_p(p);
        let a = 1.0 + w;
        let ce = if g { -p.ln() } else { -(1.0 - p).ln() };
        num += a * ce;
        den += a;
    }
    num / den
}

fn w_iou_with(pred: &ScalarMap, gt: &BinaryMask, weights: &[f64]) -> f64 {
    let (inter, union) = iou_terms(pred, gt, weights);
    if union == 0.0 {
        0.0
    } else {
        1.0 - inter / union
    }
}

fn iou_terms(pred: &ScalarMap, gt: &BinaryMask, weights: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut union = 0.0;
    for ((&p, &g), &w) in pred.data().iter().zip(gt.data()).zip(weights) {
        let a = 1.0 + w;
        let g = if g { 1.0 } else { 0.0 };
        inter += a * p * g;
        union += a * (p + g - p * g);
    }
    (inter, union)
}

/// Center-surround weighted binary cross-entropy, normalised by `sum(1 + w)`.
pub fn cs_bce(pred: &ScalarMap, gt: &BinaryMask, window: usize) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let w = center_surround_weights(gt, window)?;
    Ok(cs_bce_with(pred, gt, &w))
}

/// `1 - I / U` with `(1 + w)`-weighted soft intersection and union. An empty
/// union (zero prediction on an empty mask) scores 0.
pub fn w_iou(pred: &ScalarMap, gt: &BinaryMask, window: usize) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let w = center_surround_weights(gt, window)?;
    Ok(w_iou_with(pred, gt, &w))
}

/// Both terms and their sum for one prediction.
pub fn epa(pred: &ScalarMap, gt: &BinaryMask, window: usize) -> Result<LossBreakdown> {
    check_same_shape(pred, gt)?;
    let w = center_surround_weights(gt, window)?;
    Ok(breakdown_with(pred, gt, &w))
}

fn breakdown_with(pred: &ScalarMap, gt: &BinaryMask, w: &[f64]) -> LossBreakdown {
    let l_csbce = cs_bce_with(pred, gt, w);
    let l_wiou = w_iou_with(pred, gt, w);
    let l_epa = l_csbce + l_wiou;
    LossBreakdown {
        l_csbce,
        l_wiou,
        l_epa,
        l_total: l_epa,
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TotalLoss {
    pub total: f64,
    pub per_prediction: Vec<LossBreakdown>,
}

/// Weighted sum over the final prediction and two side predictions, in that
/// order, with weights `1, 1/2, 1/4`.
pub fn total_loss(preds: &[ScalarMap], gt: &BinaryMask, window: usize) -> Result<TotalLoss> {
    if preds.len() != PREDICTION_WEIGHTS.len() {
        return Err(LossError::PredictionCount {
            expected: PREDICTION_WEIGHTS.len(),
            found: preds.len(),
        });
    }
    let (total, per_prediction) = weighted_sum(preds, gt, window)?;
    Ok(TotalLoss { total, per_prediction })
}

/// Weighted sum over the first `preds.len()` (at most three) predictions.
pub fn weighted_sum(preds: &[ScalarMap], gt: &BinaryMask, window: usize) -> Result<(f64, Vec<LossBreakdown>)> {
    if preds.is_empty() || preds.len() > PREDICTION_WEIGHTS.len() {
        return Err(LossError::PredictionCount {
            expected: PREDICTION_WEIGHTS.len(),
            found: preds.len(),
        });
    }
    for p in preds {
        check_same_shape(p, gt)?;
    }
    let w = center_surround_weights(gt, window)?;
    let per: Vec<LossBreakdown> = preds.iter().map(|p| breakdown_with(p, gt, &w)).collect();
    let total = per.iter().zip(PREDICTION_WEIGHTS).map(|(b, k)| k * b.l_epa).sum();
    Ok((total, per))
}

/// Analytic gradient of [`epa`] with respect to each prediction pixel.
///
/// Pixels where the clamp is active get a zero cross-entropy gradient.
pub fn loss_gradient(pred: &ScalarMap, gt: &BinaryMask, window: usize) -> Result<Vec<f64>> {
    check_same_shape(pred, gt)?;
    let w = center_surround_weights(gt, window)?;
    let s: f64 = w.iter().map(|v| 1.0 + v).sum();
    let (inter, union) = iou_terms(pred, gt, &w);
    let mut grad = Vec::with_capacity(w.len());
    for ((&p, &g), &wj) in pred.data().iter().zip(gt.data()).zip(&w) {
        let a = 1.0 + wj;
        let gf = if g { 1.0 } else { 0.0 };
        let bce = if p > CLAMP && p < 1.0 - CLAMP {
            -(a / s) * (gf / p - (1.0 - gf) / (1.0 - p))
        } else {
            0.0
        };
        let iou = if union == 0.0 {
            0.0
        } else {
            -(a * gf * union - inter * a * (1.0 - gf)) / (union * union)
        };
        grad.push(bce + iou);
    }
    Ok(grad)
}

/// Gradient projected onto the feasible box `[0, 1]`: components pushing a
/// pixel already on its bound further outward are zeroed.
pub fn projected_gradient(pred: &ScalarMap, grad: &[f64]) -> Vec<f64> {
    pred.data()
        .iter()
        .zip(grad)
        .map(|(&p, &g)| {
            if (p <= 0.0 && g > 0.0) || (p >= 1.0 && g < 0.0) {
                0.0
            } else {
                g
            }
        })
        .collect()
}
