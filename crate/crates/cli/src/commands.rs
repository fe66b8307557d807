//! Subcommand implementations. Each returns a serialisable report; the binary
//! decides where to print it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use sodkit_core::depth::{hha_e_pipeline, DepthMap};
use sodkit_core::fusion::{forward_full, ForwardConfig};
use sodkit_core::losses::{self, LossBreakdown};
use sodkit_core::maps::{BinaryMask, ScalarMap};
use sodkit_core::metrics::{self, EvalPair, MetricConfig, MetricReport, THRESHOLDS};
use sodkit_core::weights::{NetworkLayout, NetworkWeights, WeightStore};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io;

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Layers of the integration pyramid used by the full forward pass.
const FORWARD_LAYERS: usize = 4;

#[derive(Debug, Clone, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<InputHash>,
}

impl RunMeta {
    fn new(command: &'static str, cfg: &RunConfig, inputs: Vec<InputHash>) -> Self {
        Self {
            tool: TOOL,
            version: VERSION,
            command,
            seed: cfg.seed,
            config: cfg.clone(),
            inputs,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<InputHash> {
    let bytes = fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    Ok(InputHash {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

/// `dir/<stem><suffix>.<ext>` next to `path`.
fn sibling(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

/// Formats `x` with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = 5 - x.abs().log10().floor() as i32;
    format!("{:.*}", digits.max(0) as usize, x)
}

#[derive(Debug, Clone, Serialize)]
pub struct EnhanceReport {
    pub meta: RunMeta,
    pub height: usize,
    pub width: usize,
    pub otsu_threshold: u8,
    pub degenerate: bool,
    pub zero_depth_count: usize,
    pub output: String,
}

pub fn enhance(depth_path: &Path, out: &Path, cfg: &RunConfig) -> Result<EnhanceReport> {
    let img = io::read_gray8_strict(depth_path)?;
    let depth = DepthMap::new(img.height, img.width, img.data)?;
    let result = hha_e_pipeline(&depth, &cfg.enhance()?, None)?;
    let hha = &result.encoding.image;
    io::write_rgb_png(out, hha.height(), hha.width(), &hha.to_interleaved())?;
    let report = EnhanceReport {
        meta: RunMeta::new("enhance", cfg, vec![hash_file(depth_path)?]),
        height: hha.height(),
        width: hha.width(),
        otsu_threshold: result.otsu.threshold,
        degenerate: result.otsu.degenerate,
        zero_depth_count: result.encoding.zero_depth_count,
        output: out.display().to_string(),
    };
    write_json(&out.with_extension("json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayoutReport {
    pub channel_width: usize,
    pub backbone_channels: usize,
    pub layers: usize,
}

impl From<&NetworkLayout> for LayoutReport {
    fn from(l: &NetworkLayout) -> Self {
        Self {
            channel_width: l.channel_width,
            backbone_channels: l.backbone_channels,
            layers: l.layers,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SideMapReport {
    /// Pyramid layer whose feedback module produced the map.
    pub layer: usize,
    pub path: String,
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForwardReport {
    pub meta: RunMeta,
    pub weights: String,
    pub layout: LayoutReport,
    pub backbone_seed: Option<u64>,
    pub otsu_threshold: u8,
    pub height: usize,
    pub width: usize,
    pub output: String,
    pub mean: f64,
    pub side_maps: Vec<SideMapReport>,
    pub mlfm_calls: usize,
    pub fim_calls: usize,
}

/// Loads weights from a container, or builds identity / seeded weights.
pub fn resolve_weights(weights: Option<&Path>, cfg: &RunConfig) -> Result<(NetworkWeights, String)> {
    let (net, source) = if let Some(path) = weights {
        let store = WeightStore::load(path)
            .map_err(|e| CliError::input(format!("weights {}: {e}", path.display())))?;
        let layout = store.infer_layout()?;
        if layout.layers != FORWARD_LAYERS {
            return Err(CliError::input(format!(
                "weights {} describe {} pyramid layers, the forward pass needs {FORWARD_LAYERS}",
                path.display(),
                layout.layers
            )));
        }
        (NetworkWeights::from_store(&store, &layout)?, format!("file:{}", path.display()))
    } else if cfg.identity_weights {
        (
            NetworkWeights::identity(&NetworkLayout::new(cfg.channel_width, FORWARD_LAYERS)),
            "identity".to_string(),
        )
    } else if cfg.seed_explicit {
        (
            NetworkWeights::seeded(cfg.seed, &NetworkLayout::new(cfg.channel_width, FORWARD_LAYERS)),
            format!("seeded:{}", cfg.seed),
        )
    } else {
        return Err(CliError::input(
            "no weights: pass --weights <file>, --seed <n> or --identity-weights",
        ));
    };
    Ok((net.with_resize_mode(cfg.resize_mode), source))
}

pub fn forward(rgb_path: &Path, depth_path: &Path, out: &Path, weights: Option<&Path>, cfg: &RunConfig) -> Result<ForwardReport> {
    let rgb = io::read_rgb8(rgb_path)?;
    let depth = io::read_gray8_strict(depth_path)?;
    if (rgb.height, rgb.width) != (depth.height, depth.width) {
        return Err(CliError::input(format!(
            "rgb is {}x{} but depth is {}x{}",
            rgb.height, rgb.width, depth.height, depth.width
        )));
    }
    let (net, source) = resolve_weights(weights, cfg)?;
    let (h, w) = (rgb.height, rgb.width);
    let s = cfg.input_size;
    let rgb_in = io::resize_rgb(&rgb, s, s);
    let depth_in = io::resize_gray(&depth, s, s);
    let depth_in = DepthMap::new(s, s, depth_in.data)?;
    let fcfg = ForwardConfig {
        enhance: cfg.enhance()?,
        seed: cfg.seed,
        backbone: cfg.backbone,
        camera: None,
    };
    let result = forward_full(&rgb_in, &depth_in, &net, &fcfg)?;

    let final_map = result.saliency.final_map.resized(h, w);
    io::write_gray_png(out, h, w, &final_map.to_u8())?;
    let mut side_maps = Vec::new();
    for (k, (map, layer)) in result
        .saliency
        .side_maps
        .iter()
        .zip(result.trace.fim_calls.iter())
        .enumerate()
    {
        let path = sibling(out, &format!("_side{}", k + 1), "png");
        let map = map.resized(h, w);
        io::write_gray_png(&path, h, w, &map.to_u8())?;
        side_maps.push(SideMapReport {
            layer: *layer,
            path: path.display().to_string(),
            mean: map.mean(),
        });
    }
    let report = ForwardReport {
        meta: RunMeta::new("forward", cfg, vec![hash_file(rgb_path)?, hash_file(depth_path)?]),
        weights: source,
        layout: (&net.layout).into(),
        backbone_seed: result.backbone_seed,
        otsu_threshold: result.hha_e.otsu.threshold,
        height: h,
        width: w,
        output: out.display().to_string(),
        mean: final_map.mean(),
        side_maps,
        mlfm_calls: result.trace.mlfm_calls.len(),
        fim_calls: result.trace.fim_calls.len(),
    };
    write_json(&out.with_extension("json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictionLoss {
    pub path: String,
    pub weight: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub meta: RunMeta,
    pub window: usize,
    pub predictions: Vec<PredictionLoss>,
    /// Weighted sum over the given predictions; absent for a single one.
    pub total: Option<f64>,
}

fn load_pred(path: &Path, gt: &BinaryMask, resize: bool) -> Result<ScalarMap> {
    let img = io::read_gray8(path)?;
    let map = ScalarMap::from_u8(img.height, img.width, &img.data)?;
    if (map.height(), map.width()) == (gt.height(), gt.width()) {
        return Ok(map);
    }
    if resize {
        return Ok(map.resized(gt.height(), gt.width()));
    }
    Err(CliError::input(format!(
        "{} is {}x{} but the ground truth is {}x{} (use --resize-pred)",
        path.display(),
        map.height(),
        map.width(),
        gt.height(),
        gt.width()
    )))
}

fn load_mask(path: &Path, threshold: u8) -> Result<BinaryMask> {
    let img = io::read_gray8(path)?;
    Ok(BinaryMask::from_u8(img.height, img.width, &img.data, threshold)?)
}

pub fn loss(preds: &[PathBuf], gt_path: &Path, cfg: &RunConfig) -> Result<LossReport> {
    if preds.is_empty() || preds.len() > losses::PREDICTION_WEIGHTS.len() {
        return Err(CliError::input(format!("loss takes 1 to 3 predictions, got {}", preds.len())));
    }
    let gt = load_mask(gt_path, cfg.gt_threshold)?;
    let maps = preds
        .iter()
        .map(|p| load_pred(p, &gt, cfg.resize_pred))
        .collect::<Result<Vec<_>>>()?;
    let (total, per) = losses::weighted_sum(&maps, &gt, cfg.window)?;
    let mut inputs = preds.iter().map(|p| hash_file(p)).collect::<Result<Vec<_>>>()?;
    inputs.push(hash_file(gt_path)?);
    Ok(LossReport {
        meta: RunMeta::new("loss", cfg, inputs),
        window: cfg.window,
        predictions: preds
            .iter()
            .zip(per)
            .zip(losses::PREDICTION_WEIGHTS)
            .map(|((p, loss), weight)| PredictionLoss {
                path: p.display().to_string(),
                weight,
                loss,
            })
            .collect(),
        total: (preds.len() > 1).then_some(total),
    })
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// Image files of `dir` keyed by file stem.
fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::input(format!("cannot list {}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if !path.is_file() || !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(CliError::input(format!(
                "ambiguous stem {stem:?} in {}: {} and {}",
                dir.display(),
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct PerImageRow {
    pub name: String,
    pub mae: f64,
    pub s_alpha: f64,
    pub mean_f: f64,
    pub mean_e: f64,
    pub gt_empty: bool,
    pub pred_sha256: String,
    pub gt_sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Unmatched {
    pub predictions: Vec<String>,
    pub ground_truth: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub images: usize,
    pub empty_gt: usize,
    pub mae: f64,
    pub s_alpha: f64,
    pub mean_f: f64,
    pub mean_e: f64,
    pub max_f: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub meta: RunMeta,
    /// SHA-256 over the ordered per-image name and input hashes; stands in
    /// for per-file entries in `meta.inputs`.
    pub dataset_sha256: String,
    pub summary: EvalSummary,
    pub warnings: usize,
    pub unmatched: Unmatched,
    #[serde(skip)]
    pub per_image: Vec<PerImageRow>,
    #[serde(skip)]
    pub aggregate: Option<MetricReport>,
}

fn evaluate_file_pair(pred: &Path, gt: &Path, cfg: &RunConfig, mcfg: &MetricConfig) -> Result<(MetricReport, String, String)> {
    let pred_bytes = fs::read(pred)?;
    let gt_bytes = fs::read(gt)?;
    let mask = load_mask(gt, cfg.gt_threshold)?;
    let map = load_pred(pred, &mask, cfg.resize_pred)?;
    let pair = EvalPair::new(map, mask)?;
    Ok((metrics::evaluate_pair(&pair, mcfg), sha256_hex(&pred_bytes), sha256_hex(&gt_bytes)))
}

/// Evaluates every prediction whose stem matches a ground-truth file and
/// writes `per_image.csv`, `aggregate.json` and `curves.csv` into `out_dir`.
pub fn eval(pred_dir: &Path, gt_dir: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    let preds = images_by_stem(pred_dir)?;
    let gts = images_by_stem(gt_dir)?;
    let names: Vec<&String> = preds.keys().filter(|k| gts.contains_key(*k)).collect();
    let unmatched = Unmatched {
        predictions: preds.keys().filter(|k| !gts.contains_key(*k)).cloned().collect(),
        ground_truth: gts.keys().filter(|k| !preds.contains_key(*k)).cloned().collect(),
    };
    if names.is_empty() {
        return Err(CliError::input(format!(
            "no matching file names between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let mcfg = MetricConfig::default();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::internal(format!("thread pool: {e}")))?;
    let results: Vec<Result<(MetricReport, String, String)>> = pool.install(|| {
        names
            .par_iter()
            .map(|n| evaluate_file_pair(&preds[*n], &gts[*n], cfg, &mcfg))
            .collect()
    });
    let mut reports = Vec::with_capacity(names.len());
    let mut rows = Vec::with_capacity(names.len());
    let mut hasher = Sha256::new();
    for (name, res) in names.iter().zip(results) {
        let (rep, ph, gh) = res.map_err(|e| match e {
            CliError::Input(m) => CliError::Input(format!("{name}: {m}")),
            other => other,
        })?;
        hasher.update(format!("{name}\t{ph}\t{gh}\n"));
        rows.push(PerImageRow {
            name: (*name).clone(),
            mae: rep.mae,
            s_alpha: rep.s_alpha,
            mean_f: rep.mean_f,
            mean_e: rep.mean_e,
            gt_empty: rep.empty_gt > 0,
            pred_sha256: ph,
            gt_sha256: gh,
        });
        reports.push(rep);
    }
    let agg = metrics::aggregate(&reports)?;

    fs::create_dir_all(out_dir)?;
    let mut csv = csv::Writer::from_path(out_dir.join("per_image.csv"))?;
    for row in &rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    let mut curves = csv::Writer::from_path(out_dir.join("curves.csv"))?;
    curves.write_record(["threshold", "precision", "recall", "f", "e"])?;
    for t in 0..THRESHOLDS {
        curves.write_record([
            t.to_string(),
            agg.precision[t].to_string(),
            agg.recall[t].to_string(),
            agg.f[t].to_string(),
            agg.e[t].to_string(),
        ])?;
    }
    curves.flush()?;

    let warnings = unmatched.predictions.len() + unmatched.ground_truth.len();
    let report = EvalReport {
        meta: RunMeta::new("eval", cfg, Vec::new()),
        dataset_sha256: hasher.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        summary: EvalSummary {
            images: reports.len(),
            empty_gt: agg.empty_gt,
            mae: agg.mae,
            s_alpha: agg.s_alpha,
            mean_f: agg.mean_f,
            mean_e: agg.mean_e,
            max_f: agg.f.iter().copied().fold(0.0, f64::max),
        },
        warnings,
        unmatched,
        per_image: rows,
        aggregate: Some(agg),
    };
    write_json(&out_dir.join("aggregate.json"), &report)?;
    Ok(report)
}

/// Writes a seeded (or identity) weight container for `layout`.
pub fn export_weights(out: &Path, layout: &NetworkLayout, cfg: &RunConfig) -> Result<usize> {
    let store = if cfg.identity_weights {
        WeightStore::identity(layout)
    } else {
        WeightStore::seeded(cfg.seed, layout)
    };
    store
        .save(out)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", out.display())))?;
    Ok(store.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(12.3456789), "12.3457");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling(Path::new("/x/out.png"), "_side1", "png"), PathBuf::from("/x/out_side1.png"));
    }
}
