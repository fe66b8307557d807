//! Depth contrast enhancement around the Otsu threshold and a simplified
//! three-channel geocentric encoding (disparity, height, gravity angle).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DepthError {
    #[error("depth map data length {len} does not match {height}x{width}")]
    Length { len: usize, height: usize, width: usize },
    #[error("depth map is empty")]
    Empty,
    #[error("depth map with {0} pixels is too large for exact thresholding")]
    TooLarge(usize),
    #[error("invalid enhancement config: {0}")]
    Config(String),
    #[error("invalid camera intrinsics: {0}")]
    Intrinsics(String),
}

pub type Result<T> = std::result::Result<T, DepthError>;

/// Single-channel 8-bit depth image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DepthError::Empty);
        }
        if data.len() != height * width {
            return Err(DepthError::Length {
                len: data.len(),
                height,
                width,
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Scale factors applied below / at-or-above the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhanceConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.8,
            lambda2: 1.2,
        }
    }
}

impl EnhanceConfig {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let cfg = Self { lambda1, lambda2 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda1 <= 1.0 && 1.0 <= self.lambda2 && self.lambda2.is_finite()) {
            return Err(DepthError::Config(format!(
                "need 0 < lambda1 <= 1 <= lambda2, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OtsuResult {
    pub threshold: u8,
    /// Set when the image holds a single intensity; `threshold` is that value.
    pub degenerate: bool,
}

pub fn histogram(depth: &DepthMap) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in &depth.data {
        hist[v as usize] += 1;
    }
    hist
}

// Between-class variance up to the constant factor 1/N^2, held as the exact
// fraction (s0*n1 - s1*n0)^2 / (n0*n1).
#[derive(Clone, Copy)]
struct Score {
    num: u128,
    den: u64,
}

// 192-bit product of a u128 and a u64 as (high u128, low u64).
fn widening_mul(a: u128, b: u64) -> (u128, u64) {
    let a_lo = a as u64 as u128;
    let a_hi = a >> 64;
    let lo = a_lo * b as u128;
    let hi = a_hi * b as u128 + (lo >> 64);
    (hi, lo as u64)
}

impl Score {
    fn greater_than(self, other: Score) -> bool {
        widening_mul(self.num, other.den) > widening_mul(other.num, self.den)
    }
}

/// Otsu threshold: the smallest `t` in `0..=255` maximising the between-class
/// variance of the split `{I < t}` / `{I >= t}`. Comparisons are exact.
pub fn otsu_threshold(depth: &DepthMap) -> Result<OtsuResult> {
    let n = depth.data.len();
    if n == 0 {
        return Err(DepthError::Empty);
    }
    if n >= 1 << 28 {
        return Err(DepthError::TooLarge(n));
    }
    let hist = histogram(depth);
    let first = depth.data[0];
    if hist[first as usize] as usize == n {
        return Ok(OtsuResult {
            threshold: first,
            degenerate: true,
        });
    }

    let total_n = n as u64;
    let total_s: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best_t = 0u8;
    let mut best = Score { num: 0, den: 1 };
    for t in 0..=255usize {
        // class 0 holds intensities < t
        if t > 0 {
            n0 += hist[t - 1];
            s0 += (t as u64 - 1) * hist[t - 1];
        }
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total_s - s0;
        let diff = (s0 as i128) * (n1 as i128) - (s1 as i128) * (n0 as i128);
        let mag = diff.unsigned_abs();
        let score = Score {
            num: mag * mag,
            den: n0 * n1,
        };
        if score.greater_than(best) {
            best = score;
            best_t = t as u8;
        }
    }
    Ok(OtsuResult {
        threshold: best_t,
        degenerate: false,
    })
}

/// Scales pixels below `t_star` by `lambda1` and the rest by `lambda2`,
/// rounding half away from zero and clamping to `[0, 255]`.
pub fn enhance_depth(depth: &DepthMap, cfg: &EnhanceConfig, t_star: u8) -> Result<DepthMap> {
    cfg.validate()?;
    let data = depth
        .data
        .iter()
        .map(|&v| enhance_pixel(v, t_star, cfg))
        .collect();
    DepthMap::new(depth.height, depth.width, data)
}

#[inline]
pub fn enhance_pixel(v: u8, t_star: u8, cfg: &EnhanceConfig) -> u8 {
    let lambda = if v < t_star { cfg.lambda1 } else { cfg.lambda2 };
    (v as f64 * lambda).round().clamp(0.0, 255.0) as u8
}

/// Pinhole camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// `fx = fy = max(H, W)`, principal point at the image centre.
    pub fn default_for(height: usize, width: usize) -> Self {
        let f = height.max(width) as f64;
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite();
        if !ok {
            return Err(DepthError::Intrinsics(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Gravity direction in camera coordinates: straight down the image.
pub const GRAVITY: [f64; 3] = [0.0, 1.0, 0.0];

/// Three 8-bit planes: disparity, height above ground, angle to gravity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HhaImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl HhaImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(DepthError::Length {
                len: data.len(),
                height,
                width,
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Planar data, channel-major.
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Pixel-interleaved RGB bytes, as stored in image files.
    pub fn to_interleaved(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            out.extend([self.data[i], self.data[n + i], self.data[2 * n + i]]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HhaEncoding {
    pub image: HhaImage,
    /// Pixels with zero depth; their disparity saturates to 255.
    pub zero_depth_count: usize,
}

/// Pre-normalisation channel values, exposed for inspection and testing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawHha {
    /// `1 / z`, `None` where `z == 0`.
    pub disparity: Vec<Option<f64>>,
    /// `-(v - cy) * z / fy` (image-up is positive).
    pub height: Vec<f64>,
    /// Angle between the camera-facing surface normal and gravity, in radians.
    pub angle: Vec<f64>,
}

pub fn raw_hha(depth: &DepthMap, camera: Option<Intrinsics>) -> Result<RawHha> {
    let (h, w) = (depth.height, depth.width);
    let cam = camera.unwrap_or_else(|| Intrinsics::default_for(h, w));
    cam.validate()?;
    let z = |y: usize, x: usize| depth.at(y, x) as f64;
    let point = |y: usize, x: usize| {
        let d = z(y, x);
        [(x as f64 - cam.cx) * d / cam.fx, (y as f64 - cam.cy) * d / cam.fy, d]
    };
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];

    let mut disparity = Vec::with_capacity(h * w);
    let mut height = Vec::with_capacity(h * w);
    let mut angle = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d = z(y, x);
            disparity.push((d > 0.0).then(|| 1.0 / d));
            height.push(-(y as f64 - cam.cy) * d / cam.fy);

            // central differences, one-sided at the border
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let tu = sub(point(y, xr), point(y, xl));
            let tv = sub(point(yd, x), point(yu, x));
            let mut n = [
                tu[1] * tv[2] - tu[2] * tv[1],
                tu[2] * tv[0] - tu[0] * tv[2],
                tu[0] * tv[1] - tu[1] * tv[0],
            ];
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            let theta = if norm > 0.0 {
                if n[2] > 0.0 {
                    n = [-n[0], -n[1], -n[2]];
                }
                let cos = (n[0] * GRAVITY[0] + n[1] * GRAVITY[1] + n[2] * GRAVITY[2]) / norm;
                cos.clamp(-1.0, 1.0).acos()
            } else {
                std::f64::consts::FRAC_PI_2
            };
            angle.push(theta);
        }
    }
    Ok(RawHha {
        disparity,
        height,
        angle,
    })
}

// Min-max normalisation to [0, 255]; a constant channel maps to `fallback`.
fn normalize(values: &[f64], fallback: impl Fn(f64) -> f64) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    values
        .iter()
        .map(|&v| {
            let scaled = if hi > lo { (v - lo) / (hi - lo) * 255.0 } else { fallback(v) };
            scaled.round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Simplified geocentric encoding. Each channel is min-max normalised to
/// `[0, 255]` independently. Constant channels: disparity and height map to 0,
/// the angle channel keeps its absolute mapping `255 * angle / pi`.
pub fn encode_hha(depth: &DepthMap, camera: Option<Intrinsics>) -> Result<HhaEncoding> {
    let raw = raw_hha(depth, camera)?;
    let n = depth.height * depth.width;

    let valid: Vec<f64> = raw.disparity.iter().flatten().copied().collect();
    let normalized_valid = normalize(&valid, |_| 0.0);
    let mut valid_iter = normalized_valid.into_iter();
    let mut disparity = Vec::with_capacity(n);
    let mut zero_depth_count = 0;
    for d in &raw.disparity {
        match d {
            Some(_) => disparity.push(valid_iter.next().expect("one value per valid pixel")),
            None => {
                zero_depth_count += 1;
                disparity.push(255);
            }
        }
    }

    let height = normalize(&raw.height, |_| 0.0);
    let angle_scaled: Vec<f64> = raw
        .angle
        .iter()
        .map(|a| a / std::f64::consts::PI * 255.0)
        .collect();
    let angle = normalize(&angle_scaled, |v| v);

    let mut data = disparity;
    data.extend(height);
    data.extend(angle);
    Ok(HhaEncoding {
        image: HhaImage::new(depth.height, depth.width, data)?,
        zero_depth_count,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HhaEResult {
    pub otsu: OtsuResult,
    pub enhanced: DepthMap,
    pub encoding: HhaEncoding,
}

/// Otsu threshold, contrast enhancement, then geocentric encoding.
pub fn hha_e_pipeline(depth: &DepthMap, cfg: &EnhanceConfig, camera: Option<Intrinsics>) -> Result<HhaEResult> {
    let otsu = otsu_threshold(depth)?;
    let enhanced = enhance_depth(depth, cfg, otsu.threshold)?;
    let encoding = encode_hha(&enhanced, camera)?;
    Ok(HhaEResult {
        otsu,
        enhanced,
        encoding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, data: Vec<u8>) -> DepthMap {
        DepthMap::new(h, w, data).unwrap()
    }

    #[test]
    fn otsu_two_level_image() {
        let mut data = vec![50u8; 32];
        data.extend(vec![200u8; 32]);
        let r = otsu_threshold(&map(8, 8, data)).unwrap();
        // every t in 51..=200 yields the same split; the smallest wins
        assert_eq!(r.threshold, 51);
        assert!(!r.degenerate);
    }

    #[test]
    fn otsu_constant_image_is_degenerate() {
        let r = otsu_threshold(&map(4, 4, vec![100; 16])).unwrap();
        assert_eq!(
            r,
            OtsuResult {
                threshold: 100,
                degenerate: true
            }
        );
    }

    #[test]
    fn widening_mul_matches_small_products() {
        assert_eq!(widening_mul(3, 5), (0, 15));
        let (hi, lo) = widening_mul(u128::MAX, u64::MAX);
        // (2^128 - 1)(2^64 - 1) = 2^192 - 2^128 - 2^64 + 1
        assert_eq!(lo, 1);
        assert_eq!(hi, u128::MAX - u64::MAX as u128 - 1);
    }

    #[test]
    fn enhance_reference_values() {
        let cfg = EnhanceConfig::default();
        assert_eq!(enhance_pixel(100, 128, &cfg), 80);
        assert_eq!(enhance_pixel(250, 128, &cfg), 255);
        assert_eq!(enhance_pixel(128, 128, &cfg), 154);
    }

    #[test]
    fn unit_lambdas_are_identity() {
        let cfg = EnhanceConfig::new(1.0, 1.0).unwrap();
        let all: Vec<u8> = (0..=255).collect();
        let d = map(16, 16, all.clone());
        for t in [0u8, 17, 128, 255] {
            assert_eq!(enhance_depth(&d, &cfg, t).unwrap().data(), &all[..]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(EnhanceConfig::new(0.0, 1.2).is_err());
        assert!(EnhanceConfig::new(1.1, 1.2).is_err());
        assert!(EnhanceConfig::new(0.8, 0.9).is_err());
        assert!(EnhanceConfig::new(0.5, 3.0).is_ok());
    }

    #[test]
    fn flat_plane_has_uniform_angle() {
        let enc = encode_hha(&map(6, 9, vec![90; 54]), None).unwrap();
        let angle = enc.image.channel(2);
        assert!(angle.iter().all(|&a| a == angle[0]));
        // fronto-parallel normal is perpendicular to gravity
        assert_eq!(angle[0], 128);
        assert_eq!(enc.zero_depth_count, 0);
    }

    #[test]
    fn step_depth_disparity_two_values() {
        let mut data = vec![40u8; 8];
        data.extend(vec![160u8; 8]);
        let d = map(4, 4, data);
        let raw = raw_hha(&d, None).unwrap();
        let mut uniq: Vec<f64> = raw.disparity.iter().map(|v| v.unwrap()).collect();
        uniq.sort_by(f64::total_cmp);
        uniq.dedup();
        assert_eq!(uniq, vec![1.0 / 160.0, 1.0 / 40.0]);
        let enc = encode_hha(&d, None).unwrap();
        let ch = enc.image.channel(0);
        assert_eq!(ch[0], 255);
        assert_eq!(ch[15], 0);
    }

    #[test]
    fn zero_depth_saturates_disparity() {
        let d = map(2, 2, vec![0, 10, 20, 30]);
        let enc = encode_hha(&d, None).unwrap();
        assert_eq!(enc.zero_depth_count, 1);
        assert_eq!(enc.image.channel(0)[0], 255);
        // 1/10 is the largest valid disparity
        assert_eq!(enc.image.channel(0)[1], 255);
        assert_eq!(enc.image.channel(0)[3], 0);
    }

    #[test]
    fn channels_hit_extremes_when_non_constant() {
        let data: Vec<u8> = (0..64).map(|i| 20 + (i * 3 % 200) as u8).collect();
        let enc = encode_hha(&map(8, 8, data), None).unwrap();
        for c in 0..3 {
            let ch = enc.image.channel(c);
            let (lo, hi) = (ch.iter().min().unwrap(), ch.iter().max().unwrap());
            if lo != hi {
                assert_eq!((*lo, *hi), (0, 255), "channel {c}");
            }
        }
    }

    #[test]
    fn pipeline_constant_image() {
        let r = hha_e_pipeline(&map(4, 4, vec![100; 16]), &EnhanceConfig::default(), None).unwrap();
        assert!(r.otsu.degenerate);
        // every pixel is >= T*, so all scale by lambda2
        assert!(r.enhanced.data().iter().all(|&v| v == 120));
    }
}
