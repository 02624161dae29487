//! Fusion rules, their monotonicity, and the rendered overlay.

use std::path::PathBuf;

use pepipe::classifier::ClassifierOutput;
use pepipe::fusion::{fuse, FusionConfig, Rule, Verdict};
use pepipe::geometry::{Detection, Rect};
use pepipe::render::{overlay, render_overlay, RED, YELLOW};
use pepipe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cls(p_yes: f64) -> ClassifierOutput {
    ClassifierOutput { p_yes, p_no: 1.0 - p_yes }
}

fn det(x: f64, y: f64, size: f64, conf: f64) -> Detection {
    Detection::new(Rect::new(x, y, x + size, y + size), conf)
}

/// Weak small box on the left, strong box on the right, near-certain
/// classification.
fn difficult_case() -> (ClassifierOutput, Vec<Detection>) {
    (cls(0.9995), vec![det(8.0, 30.0, 6.0, 0.52), det(40.0, 24.0, 12.0, 0.94)])
}

#[test]
fn weak_and_strong_box_with_confident_classifier_is_positive() {
    let (c, dets) = difficult_case();
    let v = fuse(&c, &dets, &FusionConfig::default()).unwrap();
    assert_eq!(v.verdict, Verdict::Positive);
    assert_eq!(v.max_det_conf, 0.94);
    assert!(v.rule_trace.iter().any(|f| f.rule == Rule::R1));
    assert_eq!(v.detections.len(), 2, "the weak box stays listed");
    assert!(v.is_explained());
}

#[test]
fn raising_scores_never_lowers_the_verdict() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let cfg = FusionConfig {
            tau_cls: rng.gen_range(0.05..0.95),
            tau_det: rng.gen_range(0.05..0.95),
        };
        let p = rng.gen_range(0.0..=1.0);
        let dets: Vec<Detection> = (0..rng.gen_range(0..4))
            .map(|_| det(0.0, 0.0, 4.0, rng.gen_range(0.0..=1.0)))
            .collect();
        let base = fuse(&cls(p), &dets, &cfg).unwrap();
        assert!(base.is_explained());
        assert_eq!(base, fuse(&cls(p), &dets, &cfg).unwrap());

        let higher_p = fuse(&cls(rng.gen_range(p..=1.0)), &dets, &cfg).unwrap();
        assert!(higher_p.verdict >= base.verdict);

        let mut raised = dets.clone();
        if raised.is_empty() {
            raised.push(det(0.0, 0.0, 4.0, rng.gen_range(0.0..=1.0)));
        } else {
            let i = rng.gen_range(0..raised.len());
            raised[i].confidence = rng.gen_range(raised[i].confidence..=1.0);
        }
        let higher_d = fuse(&cls(p), &raised, &cfg).unwrap();
        assert!(higher_d.verdict >= base.verdict, "{base:?} -> {higher_d:?}");
    }
}

fn fixture_image() -> Tensor<f32> {
    let n = 64;
    let data = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f32, (i / n) as f32);
            0.2 + 0.5 * ((x - 32.0).powi(2) + (y - 32.0).powi(2) < 600.0) as u8 as f32 + 0.002 * x
        })
        .collect();
    Tensor::new(vec![n, n, 1], data).unwrap()
}

#[test]
fn overlay_draws_one_rectangle_per_detection() {
    let (c, dets) = difficult_case();
    // with tau_det 0.6 the 0.52 box is weak evidence and drawn in yellow
    let cfg = FusionConfig { tau_cls: 0.5, tau_det: 0.6 };
    let v = fuse(&c, &dets, &cfg).unwrap();
    let canvas = overlay(&fixture_image(), &v).unwrap();
    let count = |color| canvas.image.pixels().filter(|p| **p == color).count();
    assert!(count(RED) > 0 && count(YELLOW) > 0);

    let none = fuse(&cls(0.1), &[], &FusionConfig::default()).unwrap();
    let plain = overlay(&fixture_image(), &none).unwrap();
    assert_eq!(plain.image.pixels().filter(|p| **p == RED || **p == YELLOW).count(), 0);
}

/// Set `PEPIPE_BLESS=1` to rewrite the golden file after an intended change.
#[test]
fn overlay_matches_golden_file() {
    let (c, dets) = difficult_case();
    let v = fuse(&c, &dets, &FusionConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("case.overlay.png");
    render_overlay(&fixture_image(), &v, &out).unwrap();
    let bytes = std::fs::read(&out).unwrap();
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/overlay_golden.png");
    if std::env::var_os("PEPIPE_BLESS").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &bytes).unwrap();
    }
    let expected = std::fs::read(&golden).expect("golden overlay missing; run with PEPIPE_BLESS=1");
    assert!(bytes == expected, "overlay differs from {}", golden.display());
}
