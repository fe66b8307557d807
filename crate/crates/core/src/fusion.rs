//! Forward-only cross-modal refinement and multi-level pyramid integration.
//!
//! The backbone is replaced by [`backbone_stub`], which fabricates side
//! outputs of the right shapes from a seed (or constants). Everything after
//! it follows the refinement / fusion / feedback structure exactly.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::depth::{hha_e_pipeline, DepthError, DepthMap, EnhanceConfig, HhaEResult, Intrinsics};
use crate::maps::ScalarMap;
use crate::tensor::{
    add, bilinear_resize_plane, conv2d_3x3, mul, reshape_r, sigmoid, weight_layer, weight_layers, ConvKernel,
    ResizeMode, Tensor, TensorError,
};
use crate::weights::{mix_seed, CmrmWeights, FimWeights, MlfmWeights, NetworkWeights, SplitMix64};

/// Number of backbone levels fed to the integration network.
pub const PYRAMID_LEVELS: usize = 4;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error("input dims {0}x{1} must be positive multiples of {2}")]
    InputDims(usize, usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("resolution chain violated: {0}")]
    ResolutionChain(String),
    #[error("mlfm needs at least 2 inputs, got {0}")]
    MlfmArity(usize),
    #[error("missing weights for {0}")]
    MissingWeights(String),
}

pub type Result<T> = std::result::Result<T, FusionError>;

/// Side outputs of both modalities at levels `2..=5`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    input_dims: (usize, usize),
    levels: BTreeMap<usize, (Tensor, Tensor)>,
}

impl FeaturePyramid {
    pub fn new(input_dims: (usize, usize), levels: BTreeMap<usize, (Tensor, Tensor)>) -> Result<Self> {
        let expected: Vec<usize> = (2..2 + PYRAMID_LEVELS).collect();
        if levels.keys().copied().collect::<Vec<_>>() != expected {
            return Err(FusionError::Shape(format!(
                "pyramid needs levels {expected:?}, got {:?}",
                levels.keys().collect::<Vec<_>>()
            )));
        }
        for (level, (rgb, hha)) in &levels {
            if rgb.shape() != hha.shape() {
                return Err(FusionError::Shape(format!(
                    "level {level}: rgb {:?} vs hha {:?}",
                    rgb.shape(),
                    hha.shape()
                )));
            }
            let (h, w) = level_dims(input_dims, *level);
            if (rgb.height(), rgb.width()) != (h, w) {
                return Err(FusionError::Shape(format!(
                    "level {level} should be {h}x{w}, got {}x{}",
                    rgb.height(),
                    rgb.width()
                )));
            }
        }
        Ok(Self { input_dims, levels })
    }

    /// Every feature of a modality holds one constant value.
    pub fn constant(input_dims: (usize, usize), channels: usize, rgb: f32, hha: f32) -> Result<Self> {
        check_input_dims(input_dims)?;
        let mut levels = BTreeMap::new();
        for level in 2..2 + PYRAMID_LEVELS {
            let (h, w) = level_dims(input_dims, level);
            levels.insert(level, (Tensor::filled(channels, h, w, rgb)?, Tensor::filled(channels, h, w, hha)?));
        }
        Self::new(input_dims, levels)
    }

    pub fn input_dims(&self) -> (usize, usize) {
        self.input_dims
    }

    pub fn level(&self, level: usize) -> Option<(&Tensor, &Tensor)> {
        self.levels.get(&level).map(|(a, b)| (a, b))
    }

    pub fn levels(&self) -> impl Iterator<Item = (usize, &Tensor, &Tensor)> {
        self.levels.iter().map(|(l, (a, b))| (*l, a, b))
    }
}

/// Resolution of backbone level `i`: `(M / 2^(i-1), N / 2^(i-1))`.
pub fn level_dims(input_dims: (usize, usize), level: usize) -> (usize, usize) {
    let f = 1usize << (level - 1);
    (input_dims.0 / f, input_dims.1 / f)
}

fn check_input_dims((m, n): (usize, usize)) -> Result<()> {
    let f = 1usize << PYRAMID_LEVELS;
    if m == 0 || n == 0 || m % f != 0 || n % f != 0 {
        return Err(FusionError::InputDims(m, n, f));
    }
    Ok(())
}

fn random_tensor(rng: &mut SplitMix64, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let data = (0..c * h * w).map(|_| rng.next_f64() as f32).collect();
    Ok(Tensor::new(c, h, w, data)?)
}

/// Stand-in for the two-stream backbone: uniform `[0, 1)` features with the
/// correct per-level shapes, drawn from SplitMix64 streams derived from `seed`.
pub fn backbone_stub(seed: u64, input_dims: (usize, usize), channels: usize) -> Result<FeaturePyramid> {
    check_input_dims(input_dims)?;
    let mut rgb_rng = SplitMix64::new(mix_seed(seed, 1));
    let mut hha_rng = SplitMix64::new(mix_seed(seed, 2));
    let mut levels = BTreeMap::new();
    for level in 2..2 + PYRAMID_LEVELS {
        let (h, w) = level_dims(input_dims, level);
        let rgb = random_tensor(&mut rgb_rng, channels, h, w)?;
        let hha = random_tensor(&mut hha_rng, channels, h, w)?;
        levels.insert(level, (rgb, hha));
    }
    FeaturePyramid::new(input_dims, levels)
}

/// Cross-modal refinement:
/// `fuse = R(W(rgb) * W(hha))`, `out = R(fuse + W(fuse))`.
pub fn cmrm(
    s_rgb: &Tensor,
    s_hha: &Tensor,
    w: &CmrmWeights,
    target_hw: (usize, usize),
    mode: ResizeMode,
) -> Result<(Tensor, Tensor)> {
    if s_rgb.shape() != s_hha.shape() {
        return Err(FusionError::Shape(format!(
            "cmrm inputs differ: {:?} vs {:?}",
            s_rgb.shape(),
            s_hha.shape()
        )));
    }
    let (th, tw) = target_hw;
    let product = mul(&weight_layer(s_rgb, &w.rgb)?, &weight_layer(s_hha, &w.hha)?)?;
    let fuse = reshape_r(&product, th, tw, &w.fuse_proj, mode)?;
    let residual = add(&fuse, &weight_layer(&fuse, &w.residual)?)?;
    let out = reshape_r(&residual, th, tw, &w.out_proj, mode)?;
    Ok((fuse, out))
}

/// Intermediate and final results of one multi-level fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct MlfmOutput {
    pub fused: Tensor,
    /// Refined low-level feature (left flow).
    pub left: Tensor,
    /// Refined high-level feature before resizing.
    pub high: Tensor,
    /// `high` resized to the next layer's resolution (down flow).
    pub down: Tensor,
}

/// Multi-level fusion. `inputs` runs from the low level (highest resolution)
/// to the high level; anything in between is a middle input.
///
/// All inputs are reshaped to the first input's resolution, then
/// `fused = W²(low) * Π W²(mid) * W²(high)` and
/// `x* = W¹(W¹(x) + fused)` for `x` in `{low, high}`.
pub fn mlfm(inputs: &[&Tensor], w: &MlfmWeights, down_hw: (usize, usize), mode: ResizeMode) -> Result<MlfmOutput> {
    if inputs.len() < 2 {
        return Err(FusionError::MlfmArity(inputs.len()));
    }
    if w.inputs.is_empty() {
        return Err(FusionError::MissingWeights("mlfm inputs".into()));
    }
    let (h, wd) = (inputs[0].height(), inputs[0].width());
    let mut aligned = Vec::with_capacity(inputs.len());
    let mut fused: Option<Tensor> = None;
    for (k, x) in inputs.iter().enumerate() {
        // the high input always takes the last site; surplus middles reuse the first
        let slot = if k + 1 == inputs.len() {
            w.inputs.len() - 1
        } else if k + 1 < w.inputs.len() {
            k
        } else {
            0
        };
        let iw = &w.inputs[slot];
        let x = reshape_r(x, h, wd, &iw.proj, mode)?;
        let t = weight_layers(&x, &[&iw.first, &iw.second])?;
        fused = Some(match fused {
            None => t,
            Some(acc) => mul(&acc, &t)?,
        });
        aligned.push(x);
    }
    let fused = fused.expect("at least two inputs");
    let low = &aligned[0];
    let high = &aligned[aligned.len() - 1];
    let left = weight_layer(&add(&weight_layer(low, &w.low_inner)?, &fused)?, &w.low_outer)?;
    let high_out = weight_layer(&add(&weight_layer(high, &w.high_inner)?, &fused)?, &w.high_outer)?;
    let down = crate::tensor::resize_spatial(&high_out, down_hw.0, down_hw.1, mode)?;
    Ok(MlfmOutput {
        fused,
        left,
        high: high_out,
        down,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FimOutput {
    pub trunk: Tensor,
    /// Feedback feature per target level.
    pub feedback: BTreeMap<usize, Tensor>,
    /// Sigmoid side prediction upsampled to the output resolution.
    pub side_map: ScalarMap,
}

/// Feedback integration: a weight-layer trunk, reshaped to each target level,
/// plus a supervised single-channel side prediction.
pub fn fim(
    f_2l: &Tensor,
    targets: &[(usize, (usize, usize))],
    w: &FimWeights,
    output_hw: (usize, usize),
    mode: ResizeMode,
) -> Result<FimOutput> {
    let trunk = weight_layer(f_2l, &w.trunk)?;
    let mut feedback = BTreeMap::new();
    for &(level, (h, wd)) in targets {
        let proj = w
            .feedback
            .get(&level)
            .ok_or_else(|| FusionError::MissingWeights(format!("fim feedback level {level}")))?;
        feedback.insert(level, reshape_r(&trunk, h, wd, proj, mode)?);
    }
    let side_map = prediction_map(&trunk, &w.side, output_hw)?;
    Ok(FimOutput {
        trunk,
        feedback,
        side_map,
    })
}

/// `sigmoid(conv3x3(x))`, bilinearly resized to `output_hw`.
fn prediction_map(x: &Tensor, head: &ConvKernel, output_hw: (usize, usize)) -> Result<ScalarMap> {
    let logits = conv2d_3x3(x, head)?;
    let probs: Vec<f64> = logits.data().iter().map(|&v| sigmoid(v as f64)).collect();
    let resized = bilinear_resize_plane(&probs, logits.height(), logits.width(), output_hw.0, output_hw.1);
    let resized = resized.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ScalarMap::new(output_hw.0, output_hw.1, resized).map_err(|e| FusionError::Shape(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlfmCall {
    pub m: usize,
    pub n: usize,
    /// Levels of the inputs, low level first.
    pub input_levels: Vec<usize>,
    pub middles: usize,
    /// Constant value of the left / down outputs when they are constant maps.
    pub left_constant: Option<f32>,
    pub down_constant: Option<f32>,
}

/// Record of the control flow taken by [`integrate`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntegrationTrace {
    pub mlfm_calls: Vec<MlfmCall>,
    /// Layer index `m` of every feedback-module call.
    pub fim_calls: Vec<usize>,
    /// Constant trunk value per feedback call, when constant.
    pub fim_trunk_constants: Vec<Option<f32>>,
    /// Layers `m` whose feedback was summed into the next layer's features.
    pub feedback_sums: Vec<usize>,
    /// Times a left feature already existed when its fusion ran.
    pub reentry_hits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyOutput {
    /// Final prediction at level-2 resolution.
    pub level2: ScalarMap,
    /// Final prediction upsampled to the input resolution.
    pub final_map: ScalarMap,
    /// One side prediction per pyramid layer, in execution order (top layer first).
    pub side_maps: Vec<ScalarMap>,
}

/// Multi-level interactive integration over `features`, ordered from level 2
/// upward (`features[k]` is level `k + 2`). The number of pyramid layers is
/// `features.len()`.
pub fn integrate(features: &[Tensor], w: &NetworkWeights) -> Result<(SaliencyOutput, IntegrationTrace)> {
    let layers = features.len();
    if layers < 2 {
        return Err(FusionError::ResolutionChain(format!("need at least 2 levels, got {layers}")));
    }
    if layers != w.layout.layers {
        return Err(FusionError::ResolutionChain(format!(
            "weights built for {} layers, got {layers} features",
            w.layout.layers
        )));
    }
    let channels = features[0].channels();
    for (k, pair) in features.windows(2).enumerate() {
        let (lo, hi) = (&pair[0], &pair[1]);
        if hi.channels() != channels || lo.height() != 2 * hi.height() || lo.width() != 2 * hi.width() {
            return Err(FusionError::ResolutionChain(format!(
                "level {} is {:?}, level {} is {:?}",
                k + 2,
                lo.shape(),
                k + 3,
                hi.shape()
            )));
        }
    }
    let mode = w.resize_mode;
    let dims_of = |level: usize| {
        let f = &features[level - 2];
        (f.height(), f.width())
    };
    let (h2, w2) = dims_of(2);
    let output_hw = (2 * h2, 2 * w2);

    let mut trace = IntegrationTrace::default();
    let mut side_maps = Vec::with_capacity(layers - 1);
    // current layer's features, keyed by level
    let mut current: BTreeMap<usize, Tensor> = features.iter().enumerate().map(|(k, f)| (k + 2, f.clone())).collect();
    let mut final_left: Option<Tensor> = None;

    for m in (2..=layers).rev() {
        let mut left: BTreeMap<(usize, usize), Tensor> = BTreeMap::new();
        let mut down: BTreeMap<usize, Tensor> = BTreeMap::new();
        for n in (2..=m).rev() {
            let mut input_levels: Vec<usize> = (n..=m + 1).collect();
            let mut inputs: Vec<&Tensor> = input_levels
                .iter()
                .map(|l| current.get(l).ok_or_else(|| FusionError::ResolutionChain(format!("missing F_{l}^{m}"))))
                .collect::<Result<_>>()?;
            if let Some(prev) = left.get(&(n, m)) {
                // re-entry: the existing left feature joins as an extra middle input
                trace.reentry_hits += 1;
                let at = inputs.len() - 1;
                inputs.insert(at, prev);
                input_levels.insert(at, n);
            }
            let weights = w
                .mlfm
                .get(&(m, n))
                .ok_or_else(|| FusionError::MissingWeights(format!("mlfm m{m} n{n}")))?;
            let out = mlfm(&inputs, weights, dims_of(n), mode)?;
            trace.mlfm_calls.push(MlfmCall {
                m,
                n,
                middles: inputs.len() - 2,
                input_levels,
                left_constant: out.left.constant_value(),
                down_constant: out.down.constant_value(),
            });
            left.insert((n, m), out.left);
            down.insert(n, out.down);
        }

        let f_2l = left.remove(&(2, m)).expect("n = 2 always runs");
        let targets: Vec<(usize, (usize, usize))> = (2..=m).rev().map(|l| (l, dims_of(l))).collect();
        let fim_w = w
            .fim
            .get(&m)
            .ok_or_else(|| FusionError::MissingWeights(format!("fim m{m}")))?;
        let fb = fim(&f_2l, &targets, fim_w, output_hw, mode)?;
        trace.fim_calls.push(m);
        trace.fim_trunk_constants.push(fb.trunk.constant_value());
        side_maps.push(fb.side_map);

        if m >= 3 {
            let mut next = BTreeMap::new();
            for level in 2..=m {
                next.insert(level, add(&fb.feedback[&level], &down[&level])?);
            }
            current = next;
            trace.feedback_sums.push(m);
        }
        final_left = Some(f_2l);
    }

    let f_2l = final_left.expect("at least one layer");
    let level2 = prediction_map(&f_2l, &w.head, (h2, w2))?;
    let final_map = level2.resized(output_hw.0, output_hw.1);
    Ok((
        SaliencyOutput {
            level2,
            final_map,
            side_maps,
        },
        trace,
    ))
}

/// Runs the refinement module at every pyramid level.
pub fn refine_pyramid(pyramid: &FeaturePyramid, w: &NetworkWeights) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(PYRAMID_LEVELS);
    for (level, rgb, hha) in pyramid.levels() {
        let cw = w
            .cmrm
            .get(&level)
            .ok_or_else(|| FusionError::MissingWeights(format!("cmrm level {level}")))?;
        let (_, refined) = cmrm(rgb, hha, cw, (rgb.height(), rgb.width()), w.resize_mode)?;
        out.push(refined);
    }
    Ok(out)
}

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(FusionError::Shape(format!(
                "rgb data length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn mean_intensity(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Source of the backbone side outputs in [`forward_full`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Pseudo-random features seeded from the run seed and the input bytes.
    #[default]
    Seeded,
    /// Constant features equal to each modality's mean intensity / 255.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardConfig {
    pub enhance: EnhanceConfig,
    pub seed: u64,
    pub backbone: BackboneKind,
    pub camera: Option<Intrinsics>,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            enhance: EnhanceConfig::default(),
            seed: 0,
            backbone: BackboneKind::Seeded,
            camera: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub saliency: SaliencyOutput,
    pub hha_e: HhaEResult,
    pub backbone_seed: Option<u64>,
    pub trace: IntegrationTrace,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Depth enhancement, backbone stand-in, refinement per level, integration.
pub fn forward_full(
    rgb: &RgbImage,
    depth: &DepthMap,
    w: &NetworkWeights,
    cfg: &ForwardConfig,
) -> Result<ForwardOutput> {
    if (rgb.height, rgb.width) != (depth.height(), depth.width()) {
        return Err(FusionError::Shape(format!(
            "rgb is {}x{}, depth is {}x{}",
            rgb.height,
            rgb.width,
            depth.height(),
            depth.width()
        )));
    }
    if w.layout.layers != PYRAMID_LEVELS {
        return Err(FusionError::ResolutionChain(format!(
            "full forward pass needs {PYRAMID_LEVELS} pyramid layers, weights have {}",
            w.layout.layers
        )));
    }
    let dims = (rgb.height, rgb.width);
    check_input_dims(dims)?;
    let hha_e = hha_e_pipeline(depth, &cfg.enhance, cfg.camera)?;
    let channels = w.layout.backbone_channels;
    let (pyramid, backbone_seed) = match cfg.backbone {
        BackboneKind::Seeded => {
            let seed = mix_seed(cfg.seed ^ fnv1a(&rgb.data), fnv1a(hha_e.encoding.image.data()));
            (backbone_stub(seed, dims, channels)?, Some(seed))
        }
        BackboneKind::Mean => {
            let hha_bytes = hha_e.encoding.image.data();
            let hha_mean = hha_bytes.iter().map(|&v| v as f64).sum::<f64>() / hha_bytes.len() as f64;
            let pyr = FeaturePyramid::constant(
                dims,
                channels,
                (rgb.mean_intensity() / 255.0) as f32,
                (hha_mean / 255.0) as f32,
            )?;
            (pyr, None)
        }
    };
    let refined = refine_pyramid(&pyramid, w)?;
    let (saliency, trace) = integrate(&refined, w)?;
    Ok(ForwardOutput {
        saliency,
        hha_e,
        backbone_seed,
        trace,
    })
}
