//! Dense `channels × height × width` feature maps and the handful of
//! deterministic kernels the fusion network is built from.
//!
//! Every kernel is a pure function. Reductions accumulate in `f64` in a fixed
//! order (input channel, then kernel row, then kernel column) so results are
//! bit-reproducible regardless of how the outer loops are scheduled.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major rank-3 tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(TensorError::Dimension(format!(
                "tensor dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(TensorError::Dimension(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("Tensor::new"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, 0.0)
    }

    // Kernels build their outputs with the right length; only finiteness is checked.
    fn from_kernel(
        op: &'static str,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        debug_assert_eq!(data.len(), channels * height * width);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(op));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Returns `Some(v)` when every element equals `v`.
    pub fn constant_value(&self) -> Option<f32> {
        let first = self.data[0];
        self.data.iter().all(|&v| v == first).then_some(first)
    }
}

/// Convolution weights shaped `(out_channels, in_channels, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    out_channels: usize,
    in_channels: usize,
    size: usize,
    weights: Vec<f32>,
}

impl ConvKernel {
    pub fn new(out_channels: usize, in_channels: usize, size: usize, weights: Vec<f32>) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 {
            return Err(TensorError::Dimension("kernel channel counts must be positive".into()));
        }
        if size != 1 && size != 3 {
            return Err(TensorError::Dimension(format!("unsupported kernel size {size}")));
        }
        if weights.len() != out_channels * in_channels * size * size {
            return Err(TensorError::Dimension(format!(
                "kernel data length {} does not match {out_channels}x{in_channels}x{size}x{size}",
                weights.len()
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("ConvKernel::new"));
        }
        Ok(Self {
            out_channels,
            in_channels,
            size,
            weights,
        })
    }

    /// Dirac kernel: output channel `o` copies input channel `o % in_channels`.
    pub fn identity(out_channels: usize, in_channels: usize, size: usize) -> Result<Self> {
        let taps = size * size;
        let center = taps / 2;
        let mut weights = vec![0.0f32; out_channels * in_channels * taps];
        for o in 0..out_channels {
            let i = o % in_channels;
            weights[(o * in_channels + i) * taps + center] = 1.0;
        }
        Self::new(out_channels, in_channels, size, weights)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.weights[((o * self.in_channels + i) * self.size + ky) * self.size + kx]
    }
}

/// Inference-mode batch-norm parameters, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

/// Epsilon used by identity batch norm: `var + eps` is exactly 1 in `f64`.
pub const IDENTITY_BN_EPS: f32 = 1.0 / 1_048_576.0;

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self::identity_with_eps(channels, IDENTITY_BN_EPS)
    }

    /// Identity transform with the variance chosen so that `var + eps == 1`.
    pub fn identity_with_eps(channels: usize, eps: f32) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0 - eps; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        if self.beta.len() != n || self.mean.len() != n || self.var.len() != n {
            return Err(TensorError::Dimension(
                "batch-norm parameter arrays differ in length".into(),
            ));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(TensorError::Config(format!(
                "batch-norm eps must be positive, got {}",
                self.eps
            )));
        }
        if self.var.iter().any(|&v| !(v >= 0.0)) {
            return Err(TensorError::Config("batch-norm variance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Parameters of one weight layer: 3×3 convolution, batch norm, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightLayerParams {
    pub conv: ConvKernel,
    pub bn: BatchNorm,
}

impl WeightLayerParams {
    pub fn new(conv: ConvKernel, bn: BatchNorm) -> Result<Self> {
        if conv.size() != 3 {
            return Err(TensorError::Dimension("weight layer kernel must be 3x3".into()));
        }
        bn.validate()?;
        if bn.channels() != conv.out_channels() {
            return Err(TensorError::Dimension(format!(
                "batch norm has {} channels, conv produces {}",
                bn.channels(),
                conv.out_channels()
            )));
        }
        Ok(Self { conv, bn })
    }

    pub fn identity(out_channels: usize, in_channels: usize) -> Self {
        Self {
            conv: ConvKernel::identity(out_channels, in_channels, 3).expect("valid identity kernel"),
            bn: BatchNorm::identity(out_channels),
        }
    }
}

/// 1×1 channel projection used by the reshaping operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub kernel: ConvKernel,
}

impl Projection {
    pub fn new(kernel: ConvKernel) -> Result<Self> {
        if kernel.size() != 1 {
            return Err(TensorError::Dimension("projection kernel must be 1x1".into()));
        }
        Ok(Self { kernel })
    }

    pub fn identity(out_channels: usize, in_channels: usize) -> Self {
        Self {
            kernel: ConvKernel::identity(out_channels, in_channels, 1).expect("valid identity kernel"),
        }
    }
}

fn conv_generic(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    if input.channels != kernel.in_channels {
        return Err(TensorError::Dimension(format!(
            "conv expects {} input channels, got {}",
            kernel.in_channels, input.channels
        )));
    }
    let (h, w) = (input.height, input.width);
    let k = kernel.size;
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut out = vec![0.0f32; kernel.out_channels * plane];

    out.par_chunks_mut(plane).enumerate().for_each(|(o, out_plane)| {
        let mut acc = vec![0.0f64; plane];
        for i in 0..input.channels {
            let src = input.plane(i);
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let wgt = kernel.at(o, i, ky, kx) as f64;
                    // rows/cols whose shifted source lies inside the image
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src_row = &src[sy * w..(sy + 1) * w];
                        let acc_row = &mut acc[y * w..(y + 1) * w];
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            acc_row[x] += wgt * src_row[sx] as f64;
                        }
                    }
                }
            }
        }
        for (dst, a) in out_plane.iter_mut().zip(acc) {
            *dst = a as f32;
        }
    });
    Tensor::from_kernel("conv", kernel.out_channels, h, w, out)
}

/// 3×3 cross-correlation, stride 1, zero padding 1.
pub fn conv2d_3x3(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    if kernel.size != 3 {
        return Err(TensorError::Dimension(format!(
            "conv2d_3x3 needs a 3x3 kernel, got {}x{}",
            kernel.size, kernel.size
        )));
    }
    conv_generic(input, kernel)
}

/// Pointwise (1×1) convolution.
pub fn conv2d_1x1(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    if kernel.size != 1 {
        return Err(TensorError::Dimension("conv2d_1x1 needs a 1x1 kernel".into()));
    }
    conv_generic(input, kernel)
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub fn batchnorm_infer(input: &Tensor, bn: &BatchNorm) -> Result<Tensor> {
    bn.validate()?;
    if bn.channels() != input.channels {
        return Err(TensorError::Dimension(format!(
            "batch norm has {} channels, input has {}",
            bn.channels(),
            input.channels
        )));
    }
    let plane = input.height * input.width;
    let mut out = Vec::with_capacity(input.data.len());
    for c in 0..input.channels {
        let denom = (bn.var[c] as f64 + bn.eps as f64).sqrt();
        let (g, b, m) = (bn.gamma[c] as f64, bn.beta[c] as f64, bn.mean[c] as f64);
        out.extend(
            input.data[c * plane..(c + 1) * plane]
                .iter()
                .map(|&x| (g * (x as f64 - m) / denom + b) as f32),
        );
    }
    Tensor::from_kernel("batchnorm", input.channels, input.height, input.width, out)
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        channels: input.channels,
        height: input.height,
        width: input.width,
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn weight_layer(input: &Tensor, params: &WeightLayerParams) -> Result<Tensor> {
    let conv = conv2d_3x3(input, &params.conv)?;
    let bn = batchnorm_infer(&conv, &params.bn)?;
    Ok(relu(&bn))
}

/// Applies `weight_layer` repeatedly.
pub fn weight_layers(input: &Tensor, layers: &[&WeightLayerParams]) -> Result<Tensor> {
    let mut cur = input.clone();
    for p in layers {
        cur = weight_layer(&cur, p)?;
    }
    Ok(cur)
}

/// Source sampling position along one axis for half-pixel-centred resizing.
#[inline]
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize with the align-corners-false convention.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::Dimension("resize target must be positive".into()));
    }
    if out_h == input.height && out_w == input.width {
        return Ok(input.clone());
    }
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, input.width, out_w)).collect();
    let rows: Vec<_> = (0..out_h).map(|y| source_coord(y, input.height, out_h)).collect();
    let mut out = Vec::with_capacity(input.channels * out_h * out_w);
    for c in 0..input.channels {
        let src = input.plane(c);
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let p = |yy: usize, xx: usize| src[yy * input.width + xx] as f64;
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bot = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out.push((top + (bot - top) * fy) as f32);
            }
        }
    }
    Tensor::from_kernel("bilinear_resize", input.channels, out_h, out_w, out)
}

/// Bilinear resize of a single `f64` plane; shares the sampling convention of
/// [`bilinear_resize`] but keeps double precision.
pub fn bilinear_resize_plane(
    src: &[f64],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), in_h * in_w);
    if in_h == out_h && in_w == out_w {
        return src.to_vec();
    }
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, in_w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = source_coord(y, in_h, out_h);
        for &(x0, x1, fx) in &cols {
            let p = |yy: usize, xx: usize| src[yy * in_w + xx];
            let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
            let bot = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

/// 2×2 max pooling with stride 2. Height and width must be even.
pub fn maxpool2x2(input: &Tensor) -> Result<Tensor> {
    if !input.height.is_multiple_of(2) || !input.width.is_multiple_of(2) {
        return Err(TensorError::Dimension(format!(
            "maxpool2x2 needs even dims, got {}x{}",
            input.height, input.width
        )));
    }
    let (oh, ow) = (input.height / 2, input.width / 2);
    let mut out = Vec::with_capacity(input.channels * oh * ow);
    for c in 0..input.channels {
        for y in 0..oh {
            for x in 0..ow {
                let m = input
                    .at(c, 2 * y, 2 * x)
                    .max(input.at(c, 2 * y, 2 * x + 1))
                    .max(input.at(c, 2 * y + 1, 2 * x))
                    .max(input.at(c, 2 * y + 1, 2 * x + 1));
                out.push(m);
            }
        }
    }
    Tensor::from_kernel("maxpool2x2", input.channels, oh, ow, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwiseOp {
    Mul,
    Add,
}

pub fn ewise(a: &Tensor, b: &Tensor, op: EwiseOp) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| match op {
            EwiseOp::Mul => x * y,
            EwiseOp::Add => x + y,
        })
        .collect();
    Tensor::from_kernel("ewise", a.channels, a.height, a.width, data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ewise(a, b, EwiseOp::Mul)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ewise(a, b, EwiseOp::Add)
}

/// How the reshaping operator changes spatial resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    /// Bilinear interpolation in both directions.
    #[default]
    Bilinear,
    /// 2×2 max pooling for exact power-of-two downscales, bilinear otherwise.
    MaxPool,
}

/// Spatial resize to `(target_h, target_w)` followed by a 1×1 projection to
/// `proj`'s output channel count.
pub fn reshape_r(
    input: &Tensor,
    target_h: usize,
    target_w: usize,
    proj: &Projection,
    mode: ResizeMode,
) -> Result<Tensor> {
    if proj.kernel.in_channels() != input.channels {
        return Err(TensorError::Dimension(format!(
            "projection expects {} channels, got {}",
            proj.kernel.in_channels(),
            input.channels
        )));
    }
    let resized = resize_spatial(input, target_h, target_w, mode)?;
    conv2d_1x1(&resized, &proj.kernel)
}

pub fn resize_spatial(input: &Tensor, target_h: usize, target_w: usize, mode: ResizeMode) -> Result<Tensor> {
    match mode {
        ResizeMode::Bilinear => bilinear_resize(input, target_h, target_w),
        ResizeMode::MaxPool => {
            let mut cur = input.clone();
            while cur.height >= 2 * target_h
                && cur.width >= 2 * target_w
                && cur.height.is_multiple_of(2)
                && cur.width.is_multiple_of(2)
            {
                cur = maxpool2x2(&cur)?;
            }
            bilinear_resize(&cur, target_h, target_w)
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
