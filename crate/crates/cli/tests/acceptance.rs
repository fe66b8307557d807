//! Acceptance suite: one line per criterion, non-zero exit on any failure.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sodkit::io::write_gray_png;
use sodkit_core::depth::{enhance_depth, enhance_pixel, otsu_threshold, DepthMap, EnhanceConfig};
use sodkit_core::fusion::{cmrm, integrate, mlfm};
use sodkit_core::losses::{self, DEFAULT_WINDOW};
use sodkit_core::maps::{BinaryMask, ScalarMap};
use sodkit_core::metrics::{self, EvalPair, MetricConfig, EPS, THRESHOLDS};
use sodkit_core::oracle;
use sodkit_core::tensor::{self, BatchNorm, ConvKernel, ResizeMode, Tensor};
use sodkit_core::weights::{NetworkLayout, NetworkWeights};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took <= limit, || format!("took {took:.2?}, limit {limit:?}"))
}

fn rng(salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed_0000 + salt)
}

fn rand_tensor(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::new(c, h, w, (0..c * h * w).map(|_| r.gen_range(-2.0f32..2.0)).collect()).unwrap()
}

fn rand_mask(r: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| r.gen_bool(p)).collect()).unwrap()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn tensor_ops() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f32;
    for case in 0..100 {
        let (c, h, w) = (r.gen_range(1..=4), r.gen_range(1..=9), r.gen_range(1..=9));
        let oc = r.gen_range(1..=4);
        let x = rand_tensor(&mut r, c, h, w);
        let k = ConvKernel::new(oc, c, 3, (0..oc * c * 9).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap();
        ensure(tensor::conv2d_3x3(&x, &k).unwrap() == oracle::conv2d(&x, &k), || format!("case {case}: conv"))?;

        let bn = BatchNorm {
            gamma: (0..c).map(|_| r.gen_range(-2.0f32..2.0)).collect(),
            beta: (0..c).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
            mean: (0..c).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
            var: (0..c).map(|_| r.gen_range(0.0f32..3.0)).collect(),
            eps: 1e-5,
        };
        let d = max_abs_diff(tensor::batchnorm_infer(&x, &bn).unwrap().data(), oracle::batchnorm(&x, &bn).data());
        worst = worst.max(d);
        ensure(d <= 1e-6, || format!("case {case}: batch norm off by {d:e}"))?;

        let (oh, ow) = (r.gen_range(1..=12), r.gen_range(1..=12));
        let d = max_abs_diff(
            tensor::bilinear_resize(&x, oh, ow).unwrap().data(),
            oracle::bilinear_resize(&x, oh, ow).data(),
        );
        worst = worst.max(d);
        ensure(d <= 1e-6, || format!("case {case}: resize off by {d:e}"))?;

        let (ph, pw) = (2 * r.gen_range(1..=4), 2 * r.gen_range(1..=4));
        let p = rand_tensor(&mut r, c, ph, pw);
        let q = rand_tensor(&mut r, c, ph, pw);
        ensure(tensor::maxpool2x2(&p).unwrap() == oracle::maxpool2x2(&p), || format!("case {case}: maxpool"))?;
        ensure(tensor::mul(&p, &q).unwrap() == oracle::ewise_mul(&p, &q), || format!("case {case}: mul"))?;
        ensure(tensor::add(&p, &q).unwrap() == oracle::ewise_add(&p, &q), || format!("case {case}: add"))?;
    }
    within(Duration::from_secs(5), start)?;
    Ok(format!("100 cases, exact conv/pool/ewise, bn/resize max error {worst:.1e}"))
}

fn otsu() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    for case in 0..200 {
        let lo: u8 = r.gen_range(0..128);
        let hi: u8 = r.gen_range(lo..=255);
        let d = DepthMap::new(16, 16, (0..256).map(|_| r.gen_range(lo..=hi)).collect()).unwrap();
        let got = otsu_threshold(&d).unwrap().threshold;
        let want = oracle::otsu(&d);
        ensure(got == want, || format!("case {case}: {got} vs exhaustive {want}"))?;
    }
    // histograms with several maximisers of the between-class variance
    let tied: [(&[(u8, usize)], u8); 3] = [
        (&[(10, 128), (200, 128)], 11),
        (&[(0, 80), (100, 80), (200, 80)], 1),
        (&[(20, 64), (120, 64), (220, 64)], 21),
    ];
    for (levels, want) in tied {
        let mut data: Vec<u8> = levels.iter().flat_map(|&(v, n)| std::iter::repeat_n(v, n)).collect();
        let n = data.len();
        let side = (n as f64).sqrt() as usize;
        let (h, w) = if side * side == n { (side, side) } else { (1, n) };
        data.truncate(h * w);
        let d = DepthMap::new(h, w, data).unwrap();
        let best = (0..=255u8)
            .map(|t| oracle::otsu_variance(&d, t))
            .max()
            .expect("256 candidates");
        let maximisers = (0..=255u8).filter(|&t| oracle::otsu_variance(&d, t) == best).count();
        ensure(maximisers > 1, || format!("{levels:?}: expected a tie, found {maximisers} maximiser"))?;
        let got = otsu_threshold(&d).unwrap().threshold;
        ensure(got == want && oracle::otsu(&d) == want, || format!("{levels:?}: picked {got}, want {want}"))?;
    }
    within(Duration::from_secs(2), start)?;
    Ok("200 random maps match the exhaustive scan, 3 tie cases pick the smallest t".into())
}

fn enhancement() -> Outcome {
    let cfg = EnhanceConfig::default();
    ensure(cfg.lambda1 == 0.8 && cfg.lambda2 == 1.2, || format!("defaults {cfg:?}"))?;
    let below = enhance_pixel(100, 128, &cfg);
    let above = enhance_pixel(250, 128, &cfg);
    ensure(below == 80, || format!("100 -> {below}"))?;
    ensure(above == 255, || format!("250 -> {above}"))?;
    let unit = EnhanceConfig::new(1.0, 1.0).map_err(|e| e.to_string())?;
    let all: Vec<u8> = (0..=255).collect();
    let d = DepthMap::new(16, 16, all.clone()).unwrap();
    for t in [0u8, 1, 128, 255] {
        ensure(enhance_depth(&d, &unit, t).unwrap().data() == all.as_slice(), || format!("identity broken at T={t}"))?;
    }
    Ok("100 -> 80, 250 -> 255 at T=128; unit lambdas are the identity".into())
}

fn identity_fixtures() -> Outcome {
    let net = NetworkWeights::identity(&NetworkLayout::new(2, 4));
    let c = |v: f32| Tensor::filled(2, 4, 4, v).unwrap();
    let (fuse, out) = cmrm(&c(2.0), &c(3.0), &net.cmrm[&2], (4, 4), ResizeMode::Bilinear).map_err(|e| e.to_string())?;
    ensure(fuse.constant_value() == Some(6.0) && out.constant_value() == Some(12.0), || {
        format!("cmrm gave {:?} / {:?}", fuse.constant_value(), out.constant_value())
    })?;
    let o = mlfm(&[&c(2.0), &c(3.0), &c(4.0)], &net.mlfm[&(4, 3)], (4, 4), ResizeMode::Bilinear)
        .map_err(|e| e.to_string())?;
    let got = (o.fused.constant_value(), o.left.constant_value(), o.high.constant_value());
    ensure(got == (Some(24.0), Some(26.0), Some(28.0)), || format!("mlfm gave {got:?}"))?;
    Ok("cmrm(2,3) = 6/12, mlfm(2,3,4) = 24/26/28 exactly".into())
}

fn integration_trace() -> Outcome {
    let start = Instant::now();
    let mut r = rng(5);
    let mut summary = Vec::new();
    for layers in 2..=5 {
        let net = NetworkWeights::seeded(layers as u64, &NetworkLayout::new(2, layers));
        let feats: Vec<Tensor> = (0..layers).map(|k| rand_tensor(&mut r, 2, 32 >> k, 32 >> k)).collect();
        let (out, trace) = integrate(&feats, &net).map_err(|e| e.to_string())?;
        let (sched, fims, sums) = oracle::integration_schedule(layers);
        let got: Vec<_> = trace.mlfm_calls.iter().map(|c| (c.m, c.n, c.input_levels.clone())).collect();
        let want: Vec<_> = sched.into_iter().map(|s| (s.m, s.n, s.input_levels)).collect();
        ensure(got == want && got.len() == layers * (layers - 1) / 2, || format!("P={layers}: calls {got:?}"))?;
        ensure(trace.fim_calls == fims && fims.len() == layers - 1, || format!("P={layers}: fim {fims:?}"))?;
        ensure(trace.feedback_sums == sums, || format!("P={layers}: sums {:?}", trace.feedback_sums))?;
        ensure((out.level2.height(), out.level2.width()) == (32, 32), || format!("P={layers}: output size"))?;
        if layers == 4 {
            ensure(got.len() == 6 && fims.len() == 3 && sums == vec![4, 3], || "P=4 counts".into())?;
        }
        summary.push(format!("P={layers}:{}/{}", got.len(), fims.len()));
    }
    within(Duration::from_secs(5), start)?;
    Ok(format!("fusion/feedback calls {}", summary.join(" ")))
}

fn loss_gradient() -> Outcome {
    let start = Instant::now();
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let g = rand_mask(&mut r, 6, 6, 0.5);
        let p = ScalarMap::new(6, 6, (0..36).map(|_| r.gen_range(0.1..0.9)).collect()).unwrap();
        let a = losses::loss_gradient(&p, &g, DEFAULT_WINDOW).map_err(|e| e.to_string())?;
        let n = oracle::loss_gradient_fd(&p, &g, DEFAULT_WINDOW, 1e-3);
        for (x, y) in a.iter().zip(&n) {
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE));
        }
        ensure(worst < 1e-4, || format!("case {case}: relative error {worst:e}"))?;
    }
    within(Duration::from_secs(10), start)?;
    Ok(format!("50 pairs, max relative error {worst:.2e}"))
}

fn loss_values() -> Outcome {
    let mut r = rng(7);
    let g = rand_mask(&mut r, 24, 24, 0.4);
    let as_map = |m: &BinaryMask| {
        ScalarMap::new(m.height(), m.width(), m.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap()
    };
    let perfect = losses::epa(&as_map(&g), &g, DEFAULT_WINDOW).map_err(|e| e.to_string())?.l_epa;
    ensure(perfect <= 1e-6, || format!("L_EPA(G, G) = {perfect:e}"))?;
    let inverted = losses::w_iou(&as_map(&g).inverted(), &g, DEFAULT_WINDOW).map_err(|e| e.to_string())?;
    ensure(inverted == 1.0, || format!("wIoU of the inverse = {inverted}"))?;
    let p = ScalarMap::new(24, 24, (0..576).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
    let single = losses::epa(&p, &g, DEFAULT_WINDOW).map_err(|e| e.to_string())?.l_epa;
    let total = losses::total_loss(&[p.clone(), p.clone(), p], &g, DEFAULT_WINDOW)
        .map_err(|e| e.to_string())?
        .total;
    ensure((total - 1.75 * single).abs() <= 1e-12 * single.abs().max(1.0), || {
        format!("total {total} vs 1.75 x {single}")
    })?;
    Ok(format!("L_EPA(G,G) = {perfect:.1e}, inverse wIoU = 1, total = 1.75 x single"))
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng(8);
    let cfg = MetricConfig::default();
    let mut worst = 0.0f64;
    for case in 0..100 {
        let fg = r.gen_range(0.05..0.95);
        let g = rand_mask(&mut r, 8, 8, fg);
        let s = if case % 4 == 0 {
            ScalarMap::from_u8(8, 8, &(0..64).map(|_| r.gen::<u8>()).collect::<Vec<_>>()).unwrap()
        } else {
            ScalarMap::new(8, 8, (0..64).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
        };
        let rep = metrics::evaluate_pair(&EvalPair::new(s.clone(), g.clone()).unwrap(), &cfg);
        let (op, or, of) = oracle::f_curve(&s, &g, cfg.beta_sq);
        let oe = oracle::e_curve(&s, &g, EPS);
        let mut err = (rep.mae - oracle::mae(&s, &g)).abs();
        err = err.max((rep.s_alpha - oracle::s_measure(&s, &g, &cfg, EPS)).abs());
        for t in 0..THRESHOLDS {
            err = err
                .max((rep.precision[t] - op[t]).abs())
                .max((rep.recall[t] - or[t]).abs())
                .max((rep.f[t] - of[t]).abs())
                .max((rep.e[t] - oe[t]).abs());
        }
        worst = worst.max(err);
        ensure(err <= 1e-9, || format!("case {case}: deviation {err:e}"))?;
    }
    for case in 0..20 {
        let s = ScalarMap::new(8, 8, (0..64).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let zero = metrics::evaluate_pair(&EvalPair::new(s.clone(), BinaryMask::new(8, 8, vec![false; 64]).unwrap()).unwrap(), &cfg);
        ensure((zero.s_alpha - (1.0 - s.mean())).abs() <= 1e-12, || format!("case {case}: empty GT S"))?;
        ensure(zero.f.iter().all(|&f| f == 0.0) && zero.empty_gt == 1, || format!("case {case}: empty GT F"))?;
        let one = metrics::evaluate_pair(&EvalPair::new(s.clone(), BinaryMask::new(8, 8, vec![true; 64]).unwrap()).unwrap(), &cfg);
        ensure((one.s_alpha - s.mean()).abs() <= 1e-12, || format!("case {case}: full GT S"))?;
    }
    within(Duration::from_secs(10), start)?;
    Ok(format!("100 pairs, max deviation {worst:.1e}; degenerate S/F rules hold"))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sodkit"))
}

fn run(cmd: &mut Command) -> Result<(), String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{:?} exited {:?}: {}", cmd, out.status.code(), String::from_utf8_lossy(&out.stderr))
    })
}

fn write_pairs(dir: &Path, count: usize, size: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let pred = dir.join("pred");
    let gt = dir.join("gt");
    std::fs::create_dir_all(&pred).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&gt).map_err(|e| e.to_string())?;
    for k in 0..count {
        let (cy, cx, rad) = (
            r.gen_range(0.2..0.8) * size as f64,
            r.gen_range(0.2..0.8) * size as f64,
            r.gen_range(0.1..0.3) * size as f64,
        );
        let mut g = Vec::with_capacity(size * size);
        let mut p = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() / rad;
                g.push(if d <= 1.0 { 255u8 } else { 0 });
                let v = 1.0 / (1.0 + (4.0 * (d - 1.0)).exp()) + r.gen_range(-0.1..0.1);
                p.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        let name = format!("img{k:03}.png");
        write_gray_png(&gt.join(&name), size, size, &g).map_err(|e| e.to_string())?;
        write_gray_png(&pred.join(&name), size, size, &p).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let mut r = rng(9);
    let (h, w) = (48, 64);
    let rgb: Vec<u8> = (0..h * w * 3).map(|_| r.gen()).collect();
    let depth: Vec<u8> = (0..h * w).map(|k| ((k % w) * 4) as u8 ^ r.gen_range(0..8)).collect();
    sodkit::io::write_rgb_png(&dir.join("rgb.png"), h, w, &rgb).map_err(|e| e.to_string())?;
    write_gray_png(&dir.join("depth.png"), h, w, &depth).map_err(|e| e.to_string())?;
    for run_id in ["a", "b"] {
        run(bin()
            .args(["--seed", "17", "--input-size", "64", "--channel-width", "8", "forward"])
            .arg(dir.join("rgb.png"))
            .arg(dir.join("depth.png"))
            .arg("-o")
            .arg(dir.join(format!("{run_id}.png"))))?;
    }
    for suffix in ["", "_side1", "_side2", "_side3"] {
        let a = read(&dir.join(format!("a{suffix}.png")))?;
        let b = read(&dir.join(format!("b{suffix}.png")))?;
        ensure(a == b, || format!("forward output a{suffix}.png differs between runs"))?;
    }

    write_pairs(dir, 12, 40, 10)?;
    for jobs in ["1", "4"] {
        run(bin()
            .args(["--jobs", jobs, "eval"])
            .arg(dir.join("pred"))
            .arg(dir.join("gt"))
            .arg("-o")
            .arg(dir.join(format!("eval{jobs}"))))?;
    }
    for file in ["per_image.csv", "curves.csv", "aggregate.json"] {
        let a = read(&dir.join("eval1").join(file))?;
        let b = read(&dir.join("eval4").join(file))?;
        ensure(a == b, || format!("{file} differs between --jobs 1 and --jobs 4"))?;
    }
    Ok("forward PNGs byte-identical across runs; eval outputs identical for 1 and 4 jobs".into())
}

fn eval_throughput() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    write_pairs(dir, 100, 352, 11)?;
    let start = Instant::now();
    run(bin()
        .args(["--jobs", "4", "eval"])
        .arg(dir.join("pred"))
        .arg(dir.join("gt"))
        .arg("-o")
        .arg(dir.join("out")))?;
    let took = start.elapsed();
    within(Duration::from_secs(60), start)?;
    let agg = String::from_utf8(read(&dir.join("out").join("aggregate.json"))?).map_err(|e| e.to_string())?;
    ensure(agg.contains("\"images\": 100"), || "aggregate does not cover 100 images".into())?;
    Ok(format!("100 pairs of 352x352 in {took:.2?} with 4 jobs"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("tensor ops match naive references", tensor_ops),
        ("otsu threshold and tie-break", otsu),
        ("piecewise depth scaling", enhancement),
        ("identity-mode refinement and fusion constants", identity_fixtures),
        ("integration call schedule", integration_trace),
        ("loss gradient vs finite differences", loss_gradient),
        ("loss reference values", loss_values),
        ("metrics vs brute force", metric_oracles),
        ("cli determinism", cli_determinism),
        ("dataset evaluation throughput", eval_throughput),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS [{:>2}] {name} ({took:.2?}): {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{:>2}] {name} ({took:.2?}): {detail}", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
