//! Target encoding, decoding and anchor estimation against direct
//! constructions.

use pepipe::detector::{decode, encode_targets, estimate_anchors, AnchorSet, SlotKind};
use pepipe::geometry::{centered_iou, Rect};
use pepipe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[test]
fn encode_then_perfect_prediction_decodes_to_ground_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (input, stride) = (64usize, 8usize);
    let grid = input / stride;
    let anchors = AnchorSet::new(vec![(6.0, 8.0), (14.0, 12.0), (24.0, 30.0)], input).unwrap();
    for _ in 0..200 {
        let w = rng.gen_range(2.0..40.0);
        let h = rng.gen_range(2.0..40.0);
        let x0 = rng.gen_range(0.0..input as f64 - w);
        let y0 = rng.gen_range(0.0..input as f64 - h);
        let gt = Rect::new(x0, y0, x0 + w, y0 + h);
        let targets = encode_targets(&[gt], &anchors, grid, input, 0.5).unwrap();
        assert_eq!(targets.positives(), 1);
        let a = anchors.len();
        let mut pred = vec![-30.0f64; grid * grid * a * 5];
        for (s, kind) in targets.kinds.iter().enumerate() {
            if *kind == SlotKind::Positive {
                let v = targets.values[s];
                let p = &mut pred[s * 5..(s + 1) * 5];
                p[0] = logit(v[0]);
                p[1] = logit(v[1]);
                p[2] = v[2];
                p[3] = v[3];
                p[4] = 30.0;
            }
        }
        let pred = Tensor::new(vec![grid, grid, a * 5], pred).unwrap();
        let found = decode(&pred, &anchors, stride, 0.5).unwrap();
        assert_eq!(found.len(), 1);
        let b = found[0].bbox;
        for (got, want) in [(b.x_min, gt.x_min), (b.y_min, gt.y_min), (b.x_max, gt.x_max), (b.y_max, gt.y_max)] {
            assert!((got - want).abs() < 1e-4, "decoded {b:?} vs {gt:?}");
        }
    }
}

fn cost(sizes: &[(f64, f64)], medoids: &[(f64, f64)]) -> f64 {
    sizes
        .iter()
        .map(|&(w, h)| {
            medoids
                .iter()
                .map(|&(mw, mh)| 1.0 - centered_iou(w, h, mw, mh))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Two well-separated size clusters: the estimate equals the exhaustive
/// best pair of medoids.
#[test]
fn anchors_match_brute_force_medoids() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = Vec::new();
        for i in 0..10 {
            let (bw, bh) = if i < 5 { (5.0, 6.0) } else { (22.0, 18.0) };
            sizes.push((bw * rng.gen_range(0.85..1.15), bh * rng.gen_range(0.85..1.15)));
        }
        let mut best = f64::INFINITY;
        for i in 0..sizes.len() {
            for j in i + 1..sizes.len() {
                best = best.min(cost(&sizes, &[sizes[i], sizes[j]]));
            }
        }
        let est = estimate_anchors(&sizes, 2, 100, 64, seed).unwrap();
        assert!(est.anchors.iter().all(|a| sizes.contains(a)), "anchors are medoids");
        let got = cost(&sizes, &est.anchors);
        assert!((got - best).abs() < 1e-12, "seed {seed}: cost {got} vs optimum {best}");
    }
}

#[test]
fn anchor_estimation_is_seed_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sizes: Vec<(f64, f64)> = (0..60).map(|_| (rng.gen_range(3.0..30.0), rng.gen_range(3.0..30.0))).collect();
    let a = estimate_anchors(&sizes, 3, 100, 64, 7).unwrap();
    let b = estimate_anchors(&sizes, 3, 100, 64, 7).unwrap();
    assert_eq!(a, b);
    let areas: Vec<f64> = a.anchors.iter().map(|(w, h)| w * h).collect();
    assert!(areas.windows(2).all(|w| w[0] <= w[1]));
}
