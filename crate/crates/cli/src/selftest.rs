//! Oracle cross-checks run by `sodkit selftest`.

use std::path::Path;

use serde::Serialize;

use sodkit_core::depth::{otsu_threshold, DepthMap, EnhanceConfig};
use sodkit_core::fusion::{backbone_stub, forward_full, integrate, refine_pyramid, ForwardConfig, RgbImage};
use sodkit_core::losses;
use sodkit_core::maps::{BinaryMask, ScalarMap};
use sodkit_core::metrics::{self, EvalPair, MetricConfig, THRESHOLDS};
use sodkit_core::oracle;
use sodkit_core::tensor::{self, BatchNorm, ConvKernel, Tensor};
use sodkit_core::weights::{mix_seed, NetworkLayout, NetworkWeights, SplitMix64, WeightStore};

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub detail: String,
}

type Outcome = Result<(usize, String), String>;

struct Rng(SplitMix64);

impl Rng {
    fn new(seed: u64, salt: u64) -> Self {
        Self(SplitMix64::new(mix_seed(seed, salt)))
    }

    fn unit(&mut self) -> f64 {
        self.0.next_f64()
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    fn index(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n as u64) as usize
    }

    fn byte(&mut self) -> u8 {
        self.0.next_u64() as u8
    }

    fn tensor(&mut self, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(c, h, w, (0..c * h * w).map(|_| self.range(-2.0, 2.0) as f32).collect()).unwrap()
    }

    fn mask(&mut self, h: usize, w: usize, p: f64) -> BinaryMask {
        BinaryMask::new(h, w, (0..h * w).map(|_| self.unit() < p).collect()).unwrap()
    }

    fn map(&mut self, h: usize, w: usize, lo: f64, hi: f64) -> ScalarMap {
        ScalarMap::new(h, w, (0..h * w).map(|_| self.range(lo, hi)).collect()).unwrap()
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tensor_suite(seed: u64) -> Outcome {
    let mut r = Rng::new(seed, 10);
    let cases = 100;
    for case in 0..cases {
        let (c, h, w) = (1 + r.index(4), 1 + r.index(8), 1 + r.index(8));
        let oc = 1 + r.index(4);
        let x = r.tensor(c, h, w);
        let k = ConvKernel::new(oc, c, 3, (0..oc * c * 9).map(|_| r.range(-1.0, 1.0) as f32).collect()).unwrap();
        let conv = tensor::conv2d_3x3(&x, &k).map_err(|e| e.to_string())?;
        check(conv == oracle::conv2d(&x, &k), || format!("case {case}: conv differs"))?;

        let bn = BatchNorm {
            gamma: (0..c).map(|_| r.range(-2.0, 2.0) as f32).collect(),
            beta: (0..c).map(|_| r.range(-1.0, 1.0) as f32).collect(),
            mean: (0..c).map(|_| r.range(-1.0, 1.0) as f32).collect(),
            var: (0..c).map(|_| r.range(0.0, 3.0) as f32).collect(),
            eps: 1e-5,
        };
        let a = tensor::batchnorm_infer(&x, &bn).map_err(|e| e.to_string())?;
        let b = oracle::batchnorm(&x, &bn);
        check(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() <= 1e-6 * (1.0 + q.abs())), || {
            format!("case {case}: batch norm differs")
        })?;

        let (oh, ow) = (1 + r.index(8), 1 + r.index(8));
        let a = tensor::bilinear_resize(&x, oh, ow).map_err(|e| e.to_string())?;
        let b = oracle::bilinear_resize(&x, oh, ow);
        check(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() <= 1e-6), || {
            format!("case {case}: resize differs")
        })?;

        let (ph, pw) = (2 * (1 + r.index(4)), 2 * (1 + r.index(4)));
        let p = r.tensor(c, ph, pw);
        let q = r.tensor(c, ph, pw);
        check(tensor::maxpool2x2(&p).unwrap() == oracle::maxpool2x2(&p), || format!("case {case}: maxpool differs"))?;
        check(tensor::mul(&p, &q).unwrap() == oracle::ewise_mul(&p, &q), || format!("case {case}: mul differs"))?;
        check(tensor::add(&p, &q).unwrap() == oracle::ewise_add(&p, &q), || format!("case {case}: add differs"))?;
        check(tensor::relu(&p) == oracle::relu(&p), || format!("case {case}: relu differs"))?;
    }
    Ok((cases, "conv/pool/ewise exact, bn/resize within 1e-6".into()))
}

fn otsu_suite(seed: u64) -> Outcome {
    let mut r = Rng::new(seed, 11);
    let cases = 200;
    for case in 0..cases {
        let lo = r.byte() / 2;
        let spread = 1 + r.index(255 - lo as usize);
        let data = (0..256).map(|_| lo + r.index(spread + 1) as u8).collect();
        let d = DepthMap::new(16, 16, data).unwrap();
        let got = otsu_threshold(&d).map_err(|e| e.to_string())?.threshold;
        let want = oracle::otsu(&d);
        check(got == want, || format!("case {case}: threshold {got}, exhaustive scan {want}"))?;
    }
    // symmetric two-level image: every t in 11..=200 splits it identically
    let mut data = vec![10u8; 128];
    data.extend([200u8; 128]);
    let d = DepthMap::new(16, 16, data).unwrap();
    let got = otsu_threshold(&d).map_err(|e| e.to_string())?.threshold;
    check(got == 11, || format!("tie-break picked {got}, expected 11"))?;
    let cfg = EnhanceConfig::new(1.0, 1.0).unwrap();
    let all: Vec<u8> = (0..=255).collect();
    let ident = sodkit_core::depth::enhance_depth(&DepthMap::new(16, 16, all.clone()).unwrap(), &cfg, 128).unwrap();
    check(ident.data() == all.as_slice(), || "unit lambdas changed intensities".into())?;
    Ok((cases + 1, "matches exhaustive rational scan; ties go to the smallest t".into()))
}

fn cs_weight_suite(seed: u64) -> Outcome {
    let mut r = Rng::new(seed, 12);
    let cases = 40;
    for case in 0..cases {
        let (h, w) = (4 + r.index(12), 4 + r.index(12));
        let window = [3, 5, 7, 31][r.index(4)];
        let fg = r.range(0.1, 0.9);
        let g = r.mask(h, w, fg);
        let a = losses::center_surround_weights(&g, window).map_err(|e| e.to_string())?;
        let b = oracle::center_surround_weights(&g, window);
        let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        check(err <= 1e-12, || format!("case {case}: window {window} max error {err:e}"))?;
    }
    Ok((cases, "scatter weights equal gathered window sums within 1e-12".into()))
}

fn gradient_suite(seed: u64) -> Outcome {
    let mut r = Rng::new(seed, 13);
    let cases = 50;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let g = r.mask(6, 6, 0.5);
        let p = r.map(6, 6, 0.1, 0.9);
        let a = losses::loss_gradient(&p, &g, losses::DEFAULT_WINDOW).map_err(|e| e.to_string())?;
        let n = oracle::loss_gradient_fd(&p, &g, losses::DEFAULT_WINDOW, 1e-3);
        for (x, y) in a.iter().zip(&n) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
        }
        check(worst < 1e-4, || format!("case {case}: relative error {worst:e}"))?;
    }
    Ok((cases, format!("max relative error {worst:.2e}")))
}

fn metric_suite(seed: u64) -> Outcome {
    let mut r = Rng::new(seed, 14);
    let cfg = MetricConfig::default();
    let cases = 100;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let fg = r.range(0.05, 0.95);
        let g = r.mask(8, 8, fg);
        let s = if case % 4 == 0 {
            // quantised like a loaded 8-bit map
            ScalarMap::from_u8(8, 8, &(0..64).map(|_| r.byte()).collect::<Vec<_>>()).unwrap()
        } else {
            r.map(8, 8, 0.0, 1.0)
        };
        let pair = EvalPair::new(s.clone(), g.clone()).unwrap();
        let rep = metrics::evaluate_pair(&pair, &cfg);
        let (op, or, of) = oracle::f_curve(&s, &g, cfg.beta_sq);
        let oe = oracle::e_curve(&s, &g, metrics::EPS);
        let mut err = (rep.mae - oracle::mae(&s, &g)).abs();
        err = err.max((rep.s_alpha - oracle::s_measure(&s, &g, &cfg, metrics::EPS)).abs());
        for t in 0..THRESHOLDS {
            err = err
                .max((rep.precision[t] - op[t]).abs())
                .max((rep.recall[t] - or[t]).abs())
                .max((rep.f[t] - of[t]).abs())
                .max((rep.e[t] - oe[t]).abs());
        }
        worst = worst.max(err);
        check(err <= 1e-9, || format!("case {case}: max deviation {err:e}"))?;
    }
    Ok((cases, format!("max deviation from brute force {worst:.2e}")))
}

fn trace_suite(seed: u64) -> Outcome {
    let mut r = Rng::new(seed, 15);
    for layers in 2..=5 {
        let net = NetworkWeights::seeded(seed, &NetworkLayout::new(2, layers));
        let feats: Vec<Tensor> = (0..layers).map(|k| r.tensor(2, 32 >> k, 32 >> k)).collect();
        let (out, trace) = integrate(&feats, &net).map_err(|e| e.to_string())?;
        let (sched, fims, sums) = oracle::integration_schedule(layers);
        let got: Vec<_> = trace.mlfm_calls.iter().map(|c| (c.m, c.n, c.input_levels.clone())).collect();
        let want: Vec<_> = sched.into_iter().map(|s| (s.m, s.n, s.input_levels)).collect();
        check(got.len() == layers * (layers - 1) / 2 && got == want, || {
            format!("P={layers}: fusion calls {got:?}")
        })?;
        check(trace.fim_calls == fims && trace.fim_calls.len() == layers - 1, || {
            format!("P={layers}: feedback calls {:?}", trace.fim_calls)
        })?;
        check(trace.feedback_sums == sums, || format!("P={layers}: sums {:?}", trace.feedback_sums))?;
        check(trace.reentry_hits == 0, || format!("P={layers}: re-entry guard fired"))?;
        check((out.level2.height(), out.level2.width()) == (32, 32), || format!("P={layers}: wrong output size"))?;
    }
    Ok((4, "call schedule matches for P = 2..5".into()))
}

fn forward_suite(seed: u64, weights: Option<&Path>) -> Outcome {
    let store = match weights {
        Some(path) => WeightStore::load(path).map_err(|e| format!("{}: {e}", path.display()))?,
        None => {
            let store = WeightStore::seeded(seed, &NetworkLayout::new(4, 4));
            WeightStore::from_bytes(&store.to_bytes()).map_err(|e| e.to_string())?
        }
    };
    let layout = store.infer_layout().map_err(|e| e.to_string())?;
    let net = NetworkWeights::from_store(&store, &layout).map_err(|e| e.to_string())?;
    let mut r = Rng::new(seed, 16);
    let rgb = RgbImage::new(32, 32, (0..32 * 32 * 3).map(|_| r.byte()).collect()).unwrap();
    let depth = DepthMap::new(32, 32, (0..32 * 32).map(|_| r.byte()).collect()).unwrap();
    let cfg = ForwardConfig {
        seed,
        ..Default::default()
    };
    let a = forward_full(&rgb, &depth, &net, &cfg).map_err(|e| e.to_string())?;
    let b = forward_full(&rgb, &depth, &net, &cfg).map_err(|e| e.to_string())?;
    check(a.saliency == b.saliency, || "forward pass is not deterministic".into())?;
    check(a.saliency.final_map.height() == 32 && a.saliency.side_maps.len() == 3, || {
        "forward output has the wrong shape".into()
    })?;
    let pyr = backbone_stub(seed, (32, 32), layout.backbone_channels).map_err(|e| e.to_string())?;
    let refined = refine_pyramid(&pyr, &net).map_err(|e| e.to_string())?;
    check(refined.len() == 4, || "refinement did not produce four levels".into())?;
    Ok((1, format!("{} weight entries, deterministic 32x32 pass", store.len())))
}

/// Runs every suite; the run passes when all suites pass.
pub fn run(seed: u64, weights: Option<&Path>) -> Vec<SuiteResult> {
    let suites: Vec<(&'static str, Box<dyn Fn() -> Outcome>)> = vec![
        ("tensor", Box::new(move || tensor_suite(seed))),
        ("otsu", Box::new(move || otsu_suite(seed))),
        ("cs_weights", Box::new(move || cs_weight_suite(seed))),
        ("gradient", Box::new(move || gradient_suite(seed))),
        ("metrics", Box::new(move || metric_suite(seed))),
        ("trace", Box::new(move || trace_suite(seed))),
        ("forward", Box::new(move || forward_suite(seed, weights))),
    ];
    suites
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((cases, detail)) => SuiteResult {
                name,
                passed: true,
                cases,
                detail,
            },
            Err(detail) => SuiteResult {
                name,
                passed: false,
                cases: 0,
                detail,
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_for_several_seeds() {
        for seed in [0, 1, 7, 42, 12345] {
            for s in run(seed, None) {
                assert!(s.passed, "seed {seed} suite {}: {}", s.name, s.detail);
            }
        }
    }

    #[test]
    fn corrupted_weights_fail_the_forward_suite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mciw");
        let mut bytes = WeightStore::seeded(0, &NetworkLayout::new(2, 4)).to_bytes();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        let forward = run(0, Some(&path)).into_iter().find(|s| s.name == "forward").unwrap();
        assert!(!forward.passed);
        assert!(forward.detail.contains("truncated"), "{}", forward.detail);
    }
}
