//! Identity weights on a constant pyramid against a scalar walk of the loops.

use sodkit_core::fusion::{integrate, refine_pyramid, FeaturePyramid};
use sodkit_core::oracle::{constant_integration, constant_refinement};
use sodkit_core::tensor::{sigmoid, Tensor};
use sodkit_core::weights::{NetworkLayout, NetworkWeights};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-5 * (1.0 + b.abs())
}

#[test]
fn identity_pipeline_matches_scalar_walk() {
    for layers in 2..=5 {
        for (rgb, hha) in [(0.5f32, 0.6f32), (0.2, 0.9), (0.8, 0.75), (0.0, 0.7)] {
            let f = constant_refinement(rgb as f64, hha as f64);
            let refined = if layers == 4 {
                let pyr = FeaturePyramid::constant((64, 64), 3, rgb, hha).unwrap();
                let four = NetworkWeights::identity(&NetworkLayout::new(3, 4));
                let refined = refine_pyramid(&pyr, &four).unwrap();
                for t in &refined {
                    assert!(close(t.constant_value().unwrap() as f64, f));
                }
                refined
            } else {
                (0..layers).map(|k| Tensor::filled(3, 64 >> k, 64 >> k, f as f32).unwrap()).collect()
            };
            let net = NetworkWeights::identity(&NetworkLayout::new(3, layers));
            let (out, trace) = integrate(&refined, &net).unwrap();
            let want = constant_integration(&vec![f; layers]);
            let lefts: Vec<f64> = trace.mlfm_calls.iter().map(|c| c.left_constant.unwrap() as f64).collect();
            assert_eq!(lefts.len(), want.lefts.len());
            for (a, b) in lefts.iter().zip(&want.lefts) {
                assert!(close(*a, *b), "P={layers}: left {a} vs {b}");
            }
            for (a, b) in trace.fim_trunk_constants.iter().zip(&want.trunks) {
                assert!(close(a.unwrap() as f64, *b), "P={layers}: trunk {a:?} vs {b}");
            }
            let p = sigmoid(want.logit);
            assert!(out.level2.data().iter().all(|&v| (v - p).abs() <= 1e-6), "P={layers}");
            assert!(out.final_map.data().iter().all(|&v| (v - p).abs() <= 1e-6), "P={layers}");
        }
    }
}
