//! Saliency evaluation: MAE, structure measure, F-measure, enhanced-alignment
//! measure and precision/recall curves over the 256 thresholds `t / 255`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maps::{check_same_shape, BinaryMask, MapError, ScalarMap};

pub const THRESHOLDS: usize = 256;

/// Guards zero denominators in the structure and alignment measures.
pub const EPS: f64 = f64::EPSILON;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub alpha: f64,
    pub beta_sq: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { alpha: 0.5, beta_sq: 0.3 }
    }
}

/// Prediction and ground truth of equal shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pred: ScalarMap,
    gt: BinaryMask,
}

impl EvalPair {
    pub fn new(pred: ScalarMap, gt: BinaryMask) -> Result<Self> {
        check_same_shape(&pred, &gt)?;
        Ok(Self { pred, gt })
    }

    /// Bilinearly resizes the prediction to the ground-truth shape first.
    pub fn resized(pred: ScalarMap, gt: BinaryMask) -> Self {
        let pred = if (pred.height(), pred.width()) == (gt.height(), gt.width()) {
            pred
        } else {
            pred.resized(gt.height(), gt.width())
        };
        Self { pred, gt }
    }

    pub fn pred(&self) -> &ScalarMap {
        &self.pred
    }

    pub fn gt(&self) -> &BinaryMask {
        &self.gt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub s_alpha: f64,
    pub mean_f: f64,
    pub mean_e: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f: Vec<f64>,
    pub e: Vec<f64>,
    /// Images whose ground truth has no foreground (F is 0 for them).
    pub empty_gt: usize,
}

pub fn mae(pair: &EvalPair) -> f64 {
    let s: f64 = pair
        .pred
        .data()
        .iter()
        .zip(pair.gt.data())
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    s / pair.pred.len() as f64
}

/// Mean and sample standard deviation (0 for fewer than two values).
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (mean, std) = mean_std(values);
    2.0 * mean / (mean * mean + 1.0 + 2.0 * std + EPS)
}

fn s_object(pair: &EvalPair) -> f64 {
    let p = pair.pred.data();
    let g = pair.gt.data();
    let fg = object_score(p.iter().zip(g).filter(|(_, &g)| g).map(|(&v, _)| v));
    let bg = object_score(p.iter().zip(g).filter(|(_, &g)| !g).map(|(&v, _)| 1.0 - v));
    let u = pair.gt.foreground_count() as f64 / g.len() as f64;
    u * fg + (1.0 - u) * bg
}

/// Ground-truth centroid as 1-based (column, row); the split puts columns
/// `1..=x` and rows `1..=y` in the top-left block.
fn centroid(gt: &BinaryMask) -> (usize, usize) {
    let (h, w) = (gt.height(), gt.width());
    let count = gt.foreground_count();
    if count == 0 {
        return ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize);
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if gt.at(y, x) {
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    let cx = (sx / count as f64).round_ties_even() as usize + 1;
    let cy = (sy / count as f64).round_ties_even() as usize + 1;
    (cx, cy)
}

fn region_ssim(pair: &EvalPair, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    let n = rows.len() * cols.len();
    if n == 0 {
        return 0.0;
    }
    let w = pair.gt.width();
    let (p, g) = (pair.pred.data(), pair.gt.data());
    let idx = || rows.clone().flat_map(|y| cols.clone().map(move |x| y * w + x));
    let gv = |i: usize| if g[i] { 1.0 } else { 0.0 };
    let mx = idx().map(|i| p[i]).sum::<f64>() / n as f64;
    let my = idx().map(gv).sum::<f64>() / n as f64;
    let d = (n.max(2) - 1) as f64;
    let sxx = idx().map(|i| (p[i] - mx).powi(2)).sum::<f64>() / d;
    let syy = idx().map(|i| (gv(i) - my).powi(2)).sum::<f64>() / d;
    let sxy = idx().map(|i| (p[i] - mx) * (gv(i) - my)).sum::<f64>() / d;
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pair: &EvalPair) -> f64 {
    let (h, w) = (pair.gt.height(), pair.gt.width());
    let (x, y) = centroid(&pair.gt);
    let (x, y) = (x.min(w), y.min(h));
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = ((w - x) * y) as f64 / area;
    let w3 = (x * (h - y)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    w1 * region_ssim(pair, 0..y, 0..x)
        + w2 * region_ssim(pair, 0..y, x..w)
        + w3 * region_ssim(pair, y..h, 0..x)
        + w4 * region_ssim(pair, y..h, x..w)
}

/// Structure measure: object-aware and region-aware similarity blended by
/// `alpha`, with the usual rules for single-class ground truth.
pub fn s_measure(pair: &EvalPair, cfg: &MetricConfig) -> f64 {
    let fg = pair.gt.foreground_count();
    if fg == 0 {
        return 1.0 - pair.pred.mean();
    }
    if fg == pair.gt.len() {
        return pair.pred.mean();
    }
    let q = cfg.alpha * s_object(pair) + (1.0 - cfg.alpha) * s_region(pair);
    q.max(0.0)
}

/// Highest threshold index `t` with `v >= t / 255`.
pub fn threshold_bin(v: f64) -> usize {
    let mut k = ((v * 255.0).floor().max(0.0) as usize).min(THRESHOLDS - 1);
    while k + 1 < THRESHOLDS && v >= (k + 1) as f64 / 255.0 {
        k += 1;
    }
    while k > 0 && v < k as f64 / 255.0 {
        k -= 1;
    }
    k
}

/// Per-threshold counts of selected pixels split by ground-truth class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdCounts {
    /// Selected foreground pixels per threshold.
    pub tp: Vec<u64>,
    /// Selected background pixels per threshold.
    pub fp: Vec<u64>,
    pub foreground: u64,
    pub total: u64,
}

pub fn threshold_counts(pair: &EvalPair) -> ThresholdCounts {
    let mut fg_hist = [0u64; THRESHOLDS];
    let mut bg_hist = [0u64; THRESHOLDS];
    for (&p, &g) in pair.pred.data().iter().zip(pair.gt.data()) {
        let k = threshold_bin(p);
        if g {
            fg_hist[k] += 1;
        } else {
            bg_hist[k] += 1;
        }
    }
    let mut tp = vec![0u64; THRESHOLDS];
    let mut fp = vec![0u64; THRESHOLDS];
    let (mut a, mut b) = (0, 0);
    for t in (0..THRESHOLDS).rev() {
        a += fg_hist[t];
        b += bg_hist[t];
        tp[t] = a;
        fp[t] = b;
    }
    ThresholdCounts {
        tp,
        fp,
        foreground: pair.gt.foreground_count() as u64,
        total: pair.gt.len() as u64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f: Vec<f64>,
    pub mean_f: f64,
    /// Ground truth has no foreground, so F is identically 0.
    pub gt_empty: bool,
}

fn f_curve_from(c: &ThresholdCounts, cfg: &MetricConfig) -> FCurve {
    let mut precision = Vec::with_capacity(THRESHOLDS);
    let mut recall = Vec::with_capacity(THRESHOLDS);
    let mut f = Vec::with_capacity(THRESHOLDS);
    let gt_empty = c.foreground == 0;
    for t in 0..THRESHOLDS {
        let selected = c.tp[t] + c.fp[t];
        let p = if selected == 0 { 0.0 } else { c.tp[t] as f64 / selected as f64 };
        let r = if c.foreground == 0 { 0.0 } else { c.tp[t] as f64 / c.foreground as f64 };
        let den = cfg.beta_sq * p + r;
        let fv = if gt_empty || den == 0.0 {
            0.0
        } else {
            (1.0 + cfg.beta_sq) * p * r / den
        };
        precision.push(p);
        recall.push(r);
        f.push(fv);
    }
    let mean_f = f.iter().sum::<f64>() / THRESHOLDS as f64;
    FCurve {
        precision,
        recall,
        f,
        mean_f,
        gt_empty,
    }
}

pub fn f_measure_curve(pair: &EvalPair, cfg: &MetricConfig) -> FCurve {
    f_curve_from(&threshold_counts(pair), cfg)
}

/// `(precision, recall)` per threshold.
pub fn pr_curve(pair: &EvalPair) -> (Vec<f64>, Vec<f64>) {
    let c = f_curve_from(&threshold_counts(pair), &MetricConfig::default());
    (c.precision, c.recall)
}

fn e_curve_from(c: &ThresholdCounts) -> (Vec<f64>, f64) {
    let n = c.total as f64;
    let fg = c.foreground;
    let mut e = Vec::with_capacity(THRESHOLDS);
    for t in 0..THRESHOLDS {
        let selected = (c.tp[t] + c.fp[t]) as f64;
        let ms = selected / n;
        let v = if fg == 0 {
            1.0 - ms
        } else if fg == c.total {
            ms
        } else {
            let mg = fg as f64 / n;
            // (gt, selected) -> pixel count
            let cells = [
                (1.0, 1.0, c.tp[t] as f64),
                (1.0, 0.0, (fg - c.tp[t]) as f64),
                (0.0, 1.0, c.fp[t] as f64),
                (0.0, 0.0, (c.total - fg - c.fp[t]) as f64),
            ];
            let mut sum = 0.0;
            for (g, s, count) in cells {
                if count == 0.0 {
                    continue;
                }
                let (pg, ps) = (g - mg, s - ms);
                let xi = 2.0 * pg * ps / (pg * pg + ps * ps + EPS);
                sum += count * (xi + 1.0) * (xi + 1.0) / 4.0;
            }
            sum / n
        };
        e.push(v);
    }
    let mean = e.iter().sum::<f64>() / THRESHOLDS as f64;
    (e, mean)
}

/// Enhanced-alignment measure per threshold and its mean.
pub fn e_measure_curve(pair: &EvalPair) -> (Vec<f64>, f64) {
    e_curve_from(&threshold_counts(pair))
}

/// All metrics for one pair.
pub fn evaluate_pair(pair: &EvalPair, cfg: &MetricConfig) -> MetricReport {
    let counts = threshold_counts(pair);
    let fc = f_curve_from(&counts, cfg);
    let (e, mean_e) = e_curve_from(&counts);
    MetricReport {
        mae: mae(pair),
        s_alpha: s_measure(pair, cfg),
        mean_f: fc.mean_f,
        mean_e,
        precision: fc.precision,
        recall: fc.recall,
        f: fc.f,
        e,
        empty_gt: usize::from(fc.gt_empty),
    }
}

/// Arithmetic mean of per-image reports, accumulated in input order.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let curve = |f: &dyn Fn(&MetricReport) -> &[f64]| {
        (0..THRESHOLDS)
            .map(|t| reports.iter().map(|r| f(r)[t]).sum::<f64>() / n)
            .collect::<Vec<_>>()
    };
    Ok(MetricReport {
        mae: mean(&|r| r.mae),
        s_alpha: mean(&|r| r.s_alpha),
        mean_f: mean(&|r| r.mean_f),
        mean_e: mean(&|r| r.mean_e),
        precision: curve(&|r| &r.precision),
        recall: curve(&|r| &r.recall),
        f: curve(&|r| &r.f),
        e: curve(&|r| &r.e),
        empty_gt: reports.iter().map(|r| r.empty_gt).sum(),
    })
}

/// Per-image reports (in input order) and their aggregate. Images are
/// evaluated on the current rayon pool.
pub fn evaluate_dataset(pairs: &[EvalPair], cfg: &MetricConfig) -> Result<(Vec<MetricReport>, MetricReport)> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    let per: Vec<MetricReport> = pairs.par_iter().map(|p| evaluate_pair(p, cfg)).collect();
    let agg = aggregate(&per)?;
    Ok((per, agg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(h: usize, w: usize, p: impl Fn(usize) -> f64, g: impl Fn(usize) -> bool) -> EvalPair {
        EvalPair::new(
            ScalarMap::new(h, w, (0..h * w).map(p).collect()).unwrap(),
            BinaryMask::new(h, w, (0..h * w).map(g).collect()).unwrap(),
        )
        .unwrap()
    }

    fn blob(i: usize) -> bool {
        let (y, x) = (i / 8, i % 8);
        (2..6).contains(&y) && (1..5).contains(&x)
    }

    #[test]
    fn mae_examples() {
        let p = pair(8, 8, |i| if blob(i) { 1.0 } else { 0.0 }, blob);
        assert_eq!(mae(&p), 0.0);
        let p = pair(8, 8, |_| 0.5, blob);
        assert_eq!(mae(&p), 0.5);
    }

    #[test]
    fn s_measure_examples() {
        let cfg = MetricConfig::default();
        let p = pair(8, 8, |i| if blob(i) { 1.0 } else { 0.0 }, blob);
        assert!((s_measure(&p, &cfg) - 1.0).abs() < 1e-9);
        let p = pair(8, 8, |_| 0.6, |_| true);
        assert!((s_measure(&p, &cfg) - 0.6).abs() < 1e-12);
        let p = pair(8, 8, |_| 0.0, |_| false);
        assert_eq!(s_measure(&p, &cfg), 1.0);
    }

    #[test]
    fn perfect_f_curve() {
        let p = pair(8, 8, |i| if blob(i) { 1.0 } else { 0.0 }, blob);
        let c = f_measure_curve(&p, &MetricConfig::default());
        assert!((c.precision[0] - 16.0 / 64.0).abs() < 1e-15);
        for t in 1..THRESHOLDS {
            assert_eq!((c.precision[t], c.recall[t], c.f[t]), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn empty_gt_flags_zero_f() {
        let p = pair(4, 4, |i| i as f64 / 15.0, |_| false);
        let c = f_measure_curve(&p, &MetricConfig::default());
        assert!(c.gt_empty);
        assert!(c.f.iter().all(|&v| v == 0.0));
        let (e, _) = e_measure_curve(&pair(4, 4, |_| 0.0, |_| false));
        // t = 0 selects every pixel
        assert_eq!(e[0], 0.0);
        assert!(e[1..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn e_measure_aligned_and_anti_aligned() {
        let p = pair(8, 8, |i| if blob(i) { 1.0 } else { 0.0 }, blob);
        let (e, _) = e_measure_curve(&p);
        for &v in &e[1..] {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let half = |i: usize| i.is_multiple_of(2);
        let p = pair(4, 4, |i| if half(i) { 0.0 } else { 1.0 }, half);
        let (e, _) = e_measure_curve(&p);
        for &v in &e[1..] {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn threshold_bin_is_inclusive() {
        for t in 0..THRESHOLDS {
            let v = t as f64 / 255.0;
            assert_eq!(threshold_bin(v), t);
        }
        assert_eq!(threshold_bin(0.0), 0);
        assert_eq!(threshold_bin(1.0), 255);
        assert_eq!(threshold_bin(0.5), 127);
    }

    #[test]
    fn dataset_means() {
        let cfg = MetricConfig::default();
        let a = pair(8, 8, |i| (i % 7) as f64 / 6.0, blob);
        assert!(matches!(evaluate_dataset(&[], &cfg), Err(MetricError::EmptyDataset)));
        let (_, single) = evaluate_dataset(std::slice::from_ref(&a), &cfg).unwrap();
        assert_eq!(single, evaluate_pair(&a, &cfg));
        let (_, dup) = evaluate_dataset(&[a.clone(), a.clone()], &cfg).unwrap();
        assert!((dup.mae - single.mae).abs() < 1e-15);
        assert!((dup.mean_e - single.mean_e).abs() < 1e-15);
    }
}
