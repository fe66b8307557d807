//! Slow, direct reference implementations used to cross-check the optimised
//! code paths (unit tests, the CLI self-test and the acceptance suite).
//!
//! Each function recomputes its quantity from the defining formula with
//! plain loops and no shared helpers from the fast paths.

use std::f64::consts::PI;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;

use crate::depth::DepthMap;
use crate::losses;
use crate::maps::{BinaryMask, ScalarMap};
use crate::metrics::MetricConfig;
use crate::tensor::{BatchNorm, ConvKernel, Projection, Tensor, WeightLayerParams};
use crate::weights::{CmrmWeights, MlfmWeights};

fn tensor(c: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor {
    Tensor::new(c, h, w, data).expect("oracle produced an invalid tensor")
}

/// Direct convolution, zero padding `size / 2`, accumulating in `f64` over
/// input channel, kernel row, kernel column.
pub fn conv2d(input: &Tensor, kernel: &ConvKernel) -> Tensor {
    let (c, h, w) = input.shape();
    let k = kernel.size() as isize;
    let pad = k / 2;
    let mut out = Vec::with_capacity(kernel.out_channels() * h * w);
    for o in 0..kernel.out_channels() {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f64;
                for i in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y + ky - pad;
                            let sx = x + kx - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let v = input.at(i, sy as usize, sx as usize) as f64;
                            acc += kernel.at(o, i, ky as usize, kx as usize) as f64 * v;
                        }
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    tensor(kernel.out_channels(), h, w, out)
}

pub fn batchnorm(input: &Tensor, bn: &BatchNorm) -> Tensor {
    let (c, h, w) = input.shape();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let xv = input.at(ch, y, x) as f64;
                let norm = (xv - bn.mean[ch] as f64) / (bn.var[ch] as f64 + bn.eps as f64).sqrt();
                out.push((norm * bn.gamma[ch] as f64 + bn.beta[ch] as f64) as f32);
            }
        }
    }
    tensor(c, h, w, out)
}

pub fn relu(input: &Tensor) -> Tensor {
    let (c, h, w) = input.shape();
    let out = input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    tensor(c, h, w, out)
}

pub fn weight_layer(input: &Tensor, p: &WeightLayerParams) -> Tensor {
    relu(&batchnorm(&conv2d(input, &p.conv), &p.bn))
}

pub fn maxpool2x2(input: &Tensor) -> Tensor {
    let (c, h, w) = input.shape();
    let mut out = Vec::new();
    for ch in 0..c {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(input.at(ch, 2 * y + dy, 2 * x + dx));
                    }
                }
                out.push(m);
            }
        }
    }
    tensor(c, h / 2, w / 2, out)
}

pub fn ewise_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let (c, h, w) = a.shape();
    tensor(c, h, w, a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())
}

pub fn ewise_add(a: &Tensor, b: &Tensor) -> Tensor {
    let (c, h, w) = a.shape();
    tensor(c, h, w, a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

/// Bilinear interpolation in the four-weight form, half-pixel centres,
/// source coordinates clamped to the image.
pub fn bilinear_resize(input: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = input.shape();
    let coord = |d: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5).max(0.0).min((n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = if lo + 1 < n_in { lo + 1 } else { lo };
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let (y0, y1, fy) = coord(y, h, oh);
            for x in 0..ow {
                let (x0, x1, fx) = coord(x, w, ow);
                let v = (1.0 - fy) * (1.0 - fx) * input.at(ch, y0, x0) as f64
                    + (1.0 - fy) * fx * input.at(ch, y0, x1) as f64
                    + fy * (1.0 - fx) * input.at(ch, y1, x0) as f64
                    + fy * fx * input.at(ch, y1, x1) as f64;
                out.push(v as f32);
            }
        }
    }
    tensor(c, oh, ow, out)
}

/// Bilinear resize then 1x1 projection.
pub fn reshape(input: &Tensor, oh: usize, ow: usize, proj: &Projection) -> Tensor {
    conv2d(&bilinear_resize(input, oh, ow), &proj.kernel)
}

/// Straight-line cross-modal refinement: `(fuse, out)`.
pub fn cmrm(rgb: &Tensor, hha: &Tensor, w: &CmrmWeights) -> (Tensor, Tensor) {
    let (_, h, wd) = rgb.shape();
    let fuse = reshape(&ewise_mul(&weight_layer(rgb, &w.rgb), &weight_layer(hha, &w.hha)), h, wd, &w.fuse_proj);
    let out = reshape(&ewise_add(&fuse, &weight_layer(&fuse, &w.residual)), h, wd, &w.out_proj);
    (fuse, out)
}

/// Straight-line multi-level fusion: `(fused, low refined, high refined)`.
pub fn mlfm(inputs: &[&Tensor], w: &MlfmWeights) -> (Tensor, Tensor, Tensor) {
    let (_, h, wd) = inputs[0].shape();
    let aligned: Vec<Tensor> = inputs
        .iter()
        .zip(&w.inputs)
        .map(|(x, iw)| reshape(x, h, wd, &iw.proj))
        .collect();
    let mut fused = None;
    for (x, iw) in aligned.iter().zip(&w.inputs) {
        let t = weight_layer(&weight_layer(x, &iw.first), &iw.second);
        fused = Some(match fused {
            None => t,
            Some(acc) => ewise_mul(&acc, &t),
        });
    }
    let fused = fused.unwrap();
    let low = weight_layer(&ewise_add(&weight_layer(&aligned[0], &w.low_inner), &fused), &w.low_outer);
    let last = aligned.last().unwrap();
    let high = weight_layer(&ewise_add(&weight_layer(last, &w.high_inner), &fused), &w.high_outer);
    (fused, low, high)
}

/// Exhaustive Otsu scan over all 256 candidates with exact rational
/// arithmetic on `w0 * w1 * (mu0 - mu1)^2`, split `{I < t}` / `{I >= t}`.
/// Ties keep the smallest `t`. A single-valued image returns that value.
pub fn otsu(depth: &DepthMap) -> u8 {
    let px = depth.data();
    if px.iter().all(|&v| v == px[0]) {
        return px[0];
    }
    let n = BigInt::from(px.len());
    let mut best: Option<(BigRational, u8)> = None;
    for t in 0..=255u16 {
        let below: Vec<u8> = px.iter().copied().filter(|&v| (v as u16) < t).collect();
        let above: Vec<u8> = px.iter().copied().filter(|&v| (v as u16) >= t).collect();
        if below.is_empty() || above.is_empty() {
            continue;
        }
        let mean = |s: &[u8]| {
            let sum: u64 = s.iter().map(|&v| v as u64).sum();
            BigRational::new(BigInt::from(sum), BigInt::from(s.len()))
        };
        let w0 = BigRational::new(BigInt::from(below.len()), n.clone());
        let w1 = BigRational::new(BigInt::from(above.len()), n.clone());
        let d = mean(&below) - mean(&above);
        let var = w0 * w1 * d.clone() * d;
        let better = match &best {
            None => true,
            Some((b, _)) => var > *b,
        };
        if better {
            best = Some((var, t as u8));
        }
    }
    best.map(|(_, t)| t).unwrap_or(0)
}

/// Between-class variance of the `{I < t}` split as an exact fraction
/// (zero when a class is empty).
pub fn otsu_variance(depth: &DepthMap, t: u8) -> BigRational {
    let px = depth.data();
    let (mut n0, mut n1, mut s0, mut s1) = (0u64, 0u64, 0u64, 0u64);
    for &v in px {
        if v < t {
            n0 += 1;
            s0 += v as u64;
        } else {
            n1 += 1;
            s1 += v as u64;
        }
    }
    if n0 == 0 || n1 == 0 {
        return BigRational::zero();
    }
    let n = BigInt::from(px.len());
    let w0 = BigRational::new(BigInt::from(n0), n.clone());
    let w1 = BigRational::new(BigInt::from(n1), n);
    let d = BigRational::new(BigInt::from(s0), BigInt::from(n0)) - BigRational::new(BigInt::from(s1), BigInt::from(n1));
    w0 * w1 * d.clone() * d
}

/// Center-surround weights gathered pixel by pixel from the ring formula.
pub fn center_surround_weights(gt: &BinaryMask, window: usize) -> Vec<f64> {
    let r = (window / 2) as i64;
    let a0 = (window * window) as f64;
    let ring = |dy: i64, dx: i64| -> f64 {
        let d = dy * dy + dx * dx;
        if d == 0 {
            return 0.0;
        }
        let mut same = 0usize;
        for a in -r..=r {
            for b in -r..=r {
                if a * a + b * b == d {
                    same += 1;
                }
            }
        }
        ((PI * d as f64 / a0 - PI / 2.0).sin() + 1.0) / (2.0 * same as f64)
    };
    let mut table = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            table.push(ring(dy, dx));
        }
    }
    let (h, w) = (gt.height() as i64, gt.width() as i64);
    let mut out = Vec::with_capacity((h * w) as usize);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h && xx < w && gt.at(yy as usize, xx as usize) {
                        s += table[((dy + r) * window as i64 + dx + r) as usize];
                    }
                }
            }
            let g = if gt.at(y as usize, x as usize) { 1.0 } else { 0.0 };
            out.push((s / a0 - g).abs());
        }
    }
    out
}

/// Central finite differences of the summed loss, step `h`.
pub fn loss_gradient_fd(pred: &ScalarMap, gt: &BinaryMask, window: usize, h: f64) -> Vec<f64> {
    let f = |data: Vec<f64>| {
        let m = ScalarMap::new(pred.height(), pred.width(), data).expect("perturbed map out of range");
        losses::epa(&m, gt, window).expect("shapes match").l_epa
    };
    (0..pred.len())
        .map(|j| {
            let mut up = pred.data().to_vec();
            let mut dn = pred.data().to_vec();
            up[j] += h;
            dn[j] -= h;
            (f(up) - f(dn)) / (2.0 * h)
        })
        .collect()
}

fn gt_value(gt: &BinaryMask, i: usize) -> f64 {
    if gt.data()[i] {
        1.0
    } else {
        0.0
    }
}

pub fn mae(pred: &ScalarMap, gt: &BinaryMask) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred.data()[i] - gt_value(gt, i)).abs();
    }
    s / pred.len() as f64
}

/// Precision, recall and F per threshold by counting set members directly.
pub fn f_curve(pred: &ScalarMap, gt: &BinaryMask, beta_sq: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let g: Vec<usize> = (0..gt.len()).filter(|&i| gt.data()[i]).collect();
    let (mut ps, mut rs, mut fs) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..256 {
        let s: Vec<usize> = (0..pred.len()).filter(|&i| pred.data()[i] >= t as f64 / 255.0).collect();
        let inter = s.iter().filter(|i| g.contains(i)).count() as f64;
        let p = if s.is_empty() { 0.0 } else { inter / s.len() as f64 };
        let r = if g.is_empty() { 0.0 } else { inter / g.len() as f64 };
        let f = if g.is_empty() || beta_sq * p + r == 0.0 {
            0.0
        } else {
            (1.0 + beta_sq) * p * r / (beta_sq * p + r)
        };
        ps.push(p);
        rs.push(r);
        fs.push(f);
    }
    (ps, rs, fs)
}

/// Enhanced-alignment score per threshold from the per-pixel definition.
pub fn e_curve(pred: &ScalarMap, gt: &BinaryMask, eps: f64) -> Vec<f64> {
    let n = pred.len() as f64;
    let g: Vec<f64> = (0..gt.len()).map(|i| gt_value(gt, i)).collect();
    let mg = g.iter().sum::<f64>() / n;
    (0..256)
        .map(|t| {
            let s: Vec<f64> = pred
                .data()
                .iter()
                .map(|&v| if v >= t as f64 / 255.0 { 1.0 } else { 0.0 })
                .collect();
            let ms = s.iter().sum::<f64>() / n;
            if mg == 0.0 {
                return 1.0 - ms;
            }
            if mg == 1.0 {
                return ms;
            }
            let mut acc = 0.0;
            for i in 0..s.len() {
                let (a, b) = (g[i] - mg, s[i] - ms);
                let xi = 2.0 * a * b / (a * a + b * b + eps);
                acc += (xi + 1.0).powi(2) / 4.0;
            }
            acc / n
        })
        .collect()
}

fn ssim(x: &[f64], y: &[f64], eps: f64) -> f64 {
    let n = x.len();
    if n == 0 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let d = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cxy = 0.0;
    for i in 0..n {
        vx += (x[i] - mx) * (x[i] - mx);
        vy += (y[i] - my) * (y[i] - my);
        cxy += (x[i] - mx) * (y[i] - my);
    }
    let (vx, vy, cxy) = (vx / d, vy / d, cxy / d);
    let a = 4.0 * mx * my * cxy;
    let b = (mx * mx + my * my) * (vx + vy);
    if a != 0.0 {
        a / (b + eps)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure with every region materialised as explicit vectors.
pub fn s_measure(pred: &ScalarMap, gt: &BinaryMask, cfg: &MetricConfig, eps: f64) -> f64 {
    let (h, w) = (gt.height(), gt.width());
    let g: Vec<f64> = (0..gt.len()).map(|i| gt_value(gt, i)).collect();
    let mg = g.iter().sum::<f64>() / g.len() as f64;
    let mp = pred.data().iter().sum::<f64>() / pred.len() as f64;
    if mg == 0.0 {
        return 1.0 - mp;
    }
    if mg == 1.0 {
        return mp;
    }
    let object = |vals: Vec<f64>| {
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let sd = if vals.len() > 1 {
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        2.0 * m / (m * m + 1.0 + 2.0 * sd + eps)
    };
    let fg: Vec<f64> = (0..g.len()).filter(|&i| g[i] == 1.0).map(|i| pred.data()[i]).collect();
    let bg: Vec<f64> = (0..g.len()).filter(|&i| g[i] == 0.0).map(|i| 1.0 - pred.data()[i]).collect();
    let so = mg * object(fg) + (1.0 - mg) * object(bg);

    let (mut sx, mut sy, mut cnt) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if g[y * w + x] == 1.0 {
                sx += x as f64;
                sy += y as f64;
                cnt += 1.0;
            }
        }
    }
    let cx = (sx / cnt).round_ties_even() as usize + 1;
    let cy = (sy / cnt).round_ties_even() as usize + 1;
    let region = |ys: std::ops::Range<usize>, xs: std::ops::Range<usize>| {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for y in ys {
            for x in xs.clone() {
                a.push(pred.data()[y * w + x]);
                b.push(g[y * w + x]);
            }
        }
        (a.len() as f64 / (h * w) as f64, ssim(&a, &b, eps))
    };
    let parts = [
        region(0..cy, 0..cx),
        region(0..cy, cx..w),
        region(cy..h, 0..cx),
        region(cy..h, cx..w),
    ];
    let sr: f64 = parts.iter().map(|(wt, s)| wt * s).sum();
    let q = cfg.alpha * so + (1.0 - cfg.alpha) * sr;
    if q < 0.0 {
        0.0
    } else {
        q
    }
}

/// One fusion call in the expected integration schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledFusion {
    pub m: usize,
    pub n: usize,
    pub input_levels: Vec<usize>,
}

/// Schedule of the integration loops for `layers` pyramid layers, written
/// out as plain nested loops: fusion calls, feedback calls and the layers
/// whose feedback is summed into the next layer.
pub fn integration_schedule(layers: usize) -> (Vec<ScheduledFusion>, Vec<usize>, Vec<usize>) {
    let mut fusions = Vec::new();
    let mut feedback = Vec::new();
    let mut sums = Vec::new();
    let mut m = layers;
    while m >= 2 {
        let mut n = m;
        while n >= 2 {
            fusions.push(ScheduledFusion {
                m,
                n,
                input_levels: (n..=m + 1).collect(),
            });
            n -= 1;
        }
        feedback.push(m);
        if m >= 3 {
            sums.push(m);
        }
        m -= 1;
    }
    (fusions, feedback, sums)
}

/// Values of the integration loops when every weight is the identity and
/// every input feature is a non-negative constant.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantTrace {
    /// Left-flow value of every fusion call, in execution order.
    pub lefts: Vec<f64>,
    /// Trunk value of every feedback call, in execution order.
    pub trunks: Vec<f64>,
    /// Logit of the final prediction head.
    pub logit: f64,
}

/// Scalar walk of the integration loops; `features[k]` is the constant at
/// level `k + 2`.
pub fn constant_integration(features: &[f64]) -> ConstantTrace {
    let layers = features.len();
    let mut current: Vec<f64> = features.to_vec();
    let mut lefts = Vec::new();
    let mut trunks = Vec::new();
    let mut last = 0.0;
    for m in (2..=layers).rev() {
        let mut down = vec![0.0; m + 1];
        let mut left2 = 0.0;
        for n in (2..=m).rev() {
            let ins = &current[n - 2..m];
            let fused: f64 = ins.iter().product();
            let left = ins[0] + fused;
            down[n] = ins[ins.len() - 1] + fused;
            lefts.push(left);
            left2 = left;
        }
        trunks.push(left2);
        if m >= 3 {
            current = (2..=m).map(|i| left2 + down[i]).collect();
        }
        last = left2;
    }
    ConstantTrace {
        lefts,
        trunks,
        logit: last,
    }
}

/// Refined feature of one level in identity mode: `2 * rgb * hha`.
pub fn constant_refinement(rgb: f64, hha: f64) -> f64 {
    2.0 * rgb * hha
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_for_four_layers() {
        let (f, fb, sums) = integration_schedule(4);
        assert_eq!(f.len(), 6);
        assert_eq!(f[0].input_levels, vec![4, 5]);
        assert_eq!(f[2].input_levels, vec![2, 3, 4, 5]);
        assert_eq!(fb, vec![4, 3, 2]);
        assert_eq!(sums, vec![4, 3]);
    }

    #[test]
    fn constant_walk_two_layers() {
        // m = 2: one fusion of (a, b) -> a + ab
        let t = constant_integration(&[2.0, 3.0]);
        assert_eq!(t.lefts, vec![8.0]);
        assert_eq!(t.logit, 8.0);
    }

    #[test]
    fn otsu_oracle_hand_case() {
        let mut px = vec![50u8; 8];
        px.extend([200u8; 8]);
        let d = DepthMap::new(4, 4, px).unwrap();
        assert_eq!(otsu(&d), 51);
        assert!(otsu_variance(&d, 51) > otsu_variance(&d, 50));
    }
}
