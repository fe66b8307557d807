//! End-to-end checks of the `sodkit` binary.

use std::path::Path;
use std::process::{Command, Output};

use sodkit::io::{read_gray8, write_gray_png, write_rgb_png};
use sodkit_core::depth::{hha_e_pipeline, DepthMap, EnhanceConfig};
use sodkit_core::oracle::{constant_integration, constant_refinement};
use sodkit_core::tensor::sigmoid;

fn sodkit(args: &[&str], paths: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sodkit"));
    cmd.args(args);
    for p in paths {
        cmd.arg(p);
    }
    cmd.output().expect("spawn sodkit")
}

fn depth_ramp(h: usize, w: usize) -> Vec<u8> {
    (0..h * w).map(|k| (40 + (k % w) * 3 + (k / w)) as u8).collect()
}

#[test]
fn enhance_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let depth = depth_ramp(24, 32);
    let input = dir.path().join("d.png");
    write_gray_png(&input, 24, 32, &depth).unwrap();
    let out = dir.path().join("hha.png");
    let o = sodkit(&["enhance"], &[&input, Path::new("-o"), &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let lib = hha_e_pipeline(&DepthMap::new(24, 32, depth).unwrap(), &EnhanceConfig::default(), None).unwrap();
    let img = image::open(&out).unwrap().to_rgb8();
    assert_eq!(img.as_raw(), &lib.encoding.image.to_interleaved());
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(meta["otsu_threshold"], lib.otsu.threshold);
    assert_eq!(meta["meta"]["command"], "enhance");
}

#[test]
fn identity_forward_follows_constant_walk() {
    let dir = tempfile::tempdir().unwrap();
    let (h, w) = (64, 64);
    let rgb = dir.path().join("rgb.png");
    let depth = dir.path().join("depth.png");
    write_rgb_png(&rgb, h, w, &vec![51u8; h * w * 3]).unwrap();
    let ramp = depth_ramp(h, w);
    write_gray_png(&depth, h, w, &ramp).unwrap();
    let out = dir.path().join("sal.png");
    let o = sodkit(
        &["--identity-weights", "--input-size", "64", "--channel-width", "4", "forward"],
        &[&rgb, &depth, Path::new("-o"), &out],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let hha = hha_e_pipeline(&DepthMap::new(h, w, ramp).unwrap(), &EnhanceConfig::default(), None).unwrap();
    let bytes = hha.encoding.image.data();
    let hha_mean = bytes.iter().map(|&v| v as f64).sum::<f64>() / bytes.len() as f64;
    let f = constant_refinement((51.0f64 / 255.0) as f32 as f64, (hha_mean / 255.0) as f32 as f64);
    let walk = constant_integration(&[f; 4]);
    let expect = |x: f64| (sigmoid(x) * 255.0).round() as i32;

    let sal = read_gray8(&out).unwrap();
    let want = expect(walk.logit);
    assert!(sal.data.iter().all(|&v| (v as i32 - want).abs() <= 1), "want {want}, got {:?}", &sal.data[..4]);
    for (k, trunk) in walk.trunks.iter().enumerate() {
        let side = read_gray8(&dir.path().join(format!("sal_side{}.png", k + 1))).unwrap();
        let want = expect(*trunk);
        assert!(side.data.iter().all(|&v| (v as i32 - want).abs() <= 1), "side {}: want {want}", k + 1);
    }
}

#[test]
fn forward_without_weights_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let rgb = dir.path().join("rgb.png");
    let depth = dir.path().join("depth.png");
    write_rgb_png(&rgb, 32, 32, &vec![0u8; 32 * 32 * 3]).unwrap();
    write_gray_png(&depth, 32, 32, &depth_ramp(32, 32)).unwrap();
    let o = sodkit(&["forward"], &[&rgb, &depth, Path::new("-o"), &dir.path().join("x.png")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no weights"));
}

#[test]
fn bad_inputs_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.png");
    let o = sodkit(&["enhance"], &[&missing, Path::new("-o"), &dir.path().join("o.png")]);
    assert_eq!(o.status.code(), Some(1));

    let gt = dir.path().join("gt.png");
    let pred = dir.path().join("pred.png");
    write_gray_png(&gt, 8, 8, &[0u8; 64]).unwrap();
    write_gray_png(&pred, 4, 4, &[0u8; 16]).unwrap();
    let o = sodkit(&["loss", "--gt"], &[&gt, Path::new("--pred"), &pred]);
    assert_eq!(o.status.code(), Some(1));

    let o = sodkit(&["--window", "4", "loss", "--gt"], &[&gt, Path::new("--pred"), &gt]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    std::fs::create_dir(&gt).unwrap();
    for k in 0..4 {
        let mask: Vec<u8> = (0..256).map(|i| if (i / 16 + i % 16 + k) % 5 < 2 { 255 } else { 0 }).collect();
        write_gray_png(&gt.join(format!("m{k}.png")), 16, 16, &mask).unwrap();
    }
    let out = dir.path().join("out");
    let o = sodkit(&["eval"], &[&gt, &gt, Path::new("-o"), &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let agg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    let s = &agg["summary"];
    assert_eq!(s["images"], 4);
    assert_eq!(s["mae"].as_f64().unwrap(), 0.0);
    assert!((s["s_alpha"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!((s["max_f"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    let rows = std::fs::read_to_string(out.join("per_image.csv")).unwrap();
    assert_eq!(rows.lines().count(), 5);
}

#[test]
fn loss_of_three_equal_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.png");
    let pred = dir.path().join("p.png");
    write_gray_png(&gt, 16, 16, &(0..256).map(|i| if i % 16 < 7 { 255 } else { 0 }).collect::<Vec<u8>>()).unwrap();
    write_gray_png(&pred, 16, 16, &(0..256).map(|i| (i % 200) as u8).collect::<Vec<u8>>()).unwrap();
    let report = dir.path().join("loss.json");
    let o = sodkit(
        &["loss", "--gt"],
        &[&gt, Path::new("--pred"), &pred, &pred, &pred, Path::new("-o"), &report],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let single = v["predictions"][0]["l_epa"].as_f64().unwrap();
    let total = v["total"].as_f64().unwrap();
    assert!((total - 1.75 * single).abs() < 1e-12);
    assert_eq!(v["predictions"][2]["weight"].as_f64().unwrap(), 0.25);
}
