//! Built-in verification suites: finite-difference gradient checks for
//! every differentiable layer kind, and a brute-force oracle for average
//! precision. Shared by the test suite and the `selftest` command.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detector::{detector_loss_var, LossWeights, SlotKind, Targets, SLOT_VALUES};
use crate::error::Result;
use crate::geometry::{Detection, Rect};
use crate::metrics::{average_precision, ImageResult};
use crate::seed;
use crate::tensor::{finite_difference_check, LayerSpec, Mode, ParamStore, Stack, Tape, Tensor, Var};

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub instances: usize,
    /// Largest error observed (relative error for gradients, absolute for AP).
    pub worst: f64,
    pub passed: bool,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Values bounded away from zero so that kinks stay outside the probe step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Distinct values with gaps far above the probe step, shuffled.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let data = ranks
        .into_iter()
        .map(|r| r as f64 * 0.05 - 0.5 + rng.gen_range(0.0..0.01))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Builds one layer with randomized parameters (biases included).
fn single_layer(spec: LayerSpec, input_shape: &[usize], rng: &mut ChaCha8Rng) -> Result<(ParamStore<f64>, Stack)> {
    let mut store = ParamStore::new();
    let stack = Stack::build("layer", &[spec], input_shape, &mut store, rng)?;
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    Ok((store, stack))
}

/// `sum(out * r)` with fixed random `r`, so all output gradients are O(1).
fn projected<'s>(tape: &mut Tape<'s, f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.input(r.clone());
    let p = tape.mul(out, rv)?;
    Ok(tape.sum(p))
}

struct Accumulator {
    name: &'static str,
    instances: usize,
    worst: f64,
    passed: bool,
}

impl Accumulator {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            instances: 0,
            worst: 0.0,
            passed: true,
        }
    }

    fn record(&mut self, report: &crate::tensor::GradCheckReport) {
        self.instances += 1;
        self.worst = self.worst.max(report.max_relative_error());
        self.passed &= report.passed();
    }

    fn finish(self) -> SuiteEntry {
        SuiteEntry {
            name: self.name.to_string(),
            instances: self.instances,
            worst: self.worst,
            passed: self.passed && self.instances > 0,
        }
    }
}

fn check_stack(spec: LayerSpec, input: Tensor<f64>, rng: &mut ChaCha8Rng) -> Result<crate::tensor::GradCheckReport> {
    let (store, stack) = single_layer(spec, input.shape(), rng)?;
    let r = uniform_tensor(rng, stack.output_shape(), -1.0, 1.0);
    finite_difference_check(
        &store,
        &input,
        |tape, store, x| {
            let mut unused = seed::rng(0, &[]);
            let y = stack.forward(tape, store, x, Mode::Eval, &mut unused)?;
            projected(tape, y, &r)
        },
        GRAD_TOLERANCE,
    )
}

/// One entry per differentiable layer kind and loss, `instances` random
/// cases each, all in double precision.
pub fn gradient_suite(instances: usize, seed_value: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();

    let mut acc = Accumulator::new("conv2d");
    let mut rng = seed::rng(seed_value, &[1]);
    for _ in 0..instances {
        let kernel = [1, 3, 5][rng.gen_range(0..3)];
        let padding = rng.gen_range(0..=kernel / 2);
        let stride = rng.gen_range(1..=2);
        let h = rng.gen_range(kernel.max(3)..=7);
        let w = rng.gen_range(kernel.max(3)..=7);
        let c = rng.gen_range(1..=3);
        let spec = LayerSpec::Conv2d {
            filters: rng.gen_range(1..=3),
            kernel,
            stride,
            padding,
        };
        let input = uniform_tensor(&mut rng, &[h, w, c], -1.0, 1.0);
        acc.record(&check_stack(spec, input, &mut rng)?);
    }
    out.push(acc.finish());

    let mut acc = Accumulator::new("dense");
    let mut rng = seed::rng(seed_value, &[2]);
    for _ in 0..instances {
        let spec = LayerSpec::Dense {
            units: rng.gen_range(1..=6),
        };
        let n = rng.gen_range(1..=8);
        let input = uniform_tensor(&mut rng, &[n], -1.0, 1.0);
        acc.record(&check_stack(spec, input, &mut rng)?);
    }
    out.push(acc.finish());

    let mut acc = Accumulator::new("relu");
    let mut rng = seed::rng(seed_value, &[3]);
    for _ in 0..instances {
        let shape = [rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=3)];
        let input = away_from_zero(&mut rng, &shape);
        acc.record(&check_stack(LayerSpec::Relu, input, &mut rng)?);
    }
    out.push(acc.finish());

    let mut acc = Accumulator::new("maxpool2");
    let mut rng = seed::rng(seed_value, &[4]);
    for _ in 0..instances {
        let shape = [2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3), rng.gen_range(1..=3)];
        let input = well_separated(&mut rng, &shape);
        acc.record(&check_stack(LayerSpec::Maxpool2, input, &mut rng)?);
    }
    out.push(acc.finish());

    let mut acc = Accumulator::new("global_avg_pool");
    let mut rng = seed::rng(seed_value, &[5]);
    for _ in 0..instances {
        let shape = [rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=4)];
        let input = uniform_tensor(&mut rng, &shape, -1.0, 1.0);
        acc.record(&check_stack(LayerSpec::GlobalAvgPool, input, &mut rng)?);
    }
    out.push(acc.finish());

    let mut acc = Accumulator::new("dropout");
    let mut rng = seed::rng(seed_value, &[6]);
    for i in 0..instances {
        let n = rng.gen_range(2..=12);
        let ratio = rng.gen_range(0.1..0.6);
        let input = uniform_tensor(&mut rng, &[n], -1.0, 1.0);
        let r = uniform_tensor(&mut rng, &[n], -1.0, 1.0);
        let store = ParamStore::new();
        let report = finite_difference_check(
            &store,
            &input,
            |tape, _, x| {
                // same mask on every evaluation
                let mut mask_rng = seed::rng(seed_value, &[6, i as u64]);
                let y = tape.dropout(x, ratio, Mode::Train, &mut mask_rng)?;
                projected(tape, y, &r)
            },
            GRAD_TOLERANCE,
        )?;
        acc.record(&report);
    }
    out.push(acc.finish());

    let mut acc = Accumulator::new("softmax");
    let mut rng = seed::rng(seed_value, &[7]);
    for _ in 0..instances {
        let n = rng.gen_range(2..=6);
        let input = uniform_tensor(&mut rng, &[n], -3.0, 3.0);
        acc.record(&check_stack(LayerSpec::Softmax, input, &mut rng)?);
    }
    out.push(acc.finish());

    let mut acc = Accumulator::new("cross_entropy_l2");
    let mut rng = seed::rng(seed_value, &[8]);
    for _ in 0..instances {
        let n_in = rng.gen_range(1..=6);
        let classes = rng.gen_range(2..=4);
        let (store, stack) = single_layer(LayerSpec::Dense { units: classes }, &[n_in], &mut rng)?;
        let target = rng.gen_range(0..classes);
        let l2 = [0.0, 0.005, 0.1][rng.gen_range(0..3)];
        let input = uniform_tensor(&mut rng, &[n_in], -1.0, 1.0);
        let weights = stack.weight_ids();
        let report = finite_difference_check(
            &store,
            &input,
            |tape, store, x| {
                let mut unused = seed::rng(0, &[]);
                let logits = stack.forward(tape, store, x, Mode::Eval, &mut unused)?;
                let p = tape.softmax(logits)?;
                let ws: Vec<Var> = weights.iter().map(|&id| tape.param(store, id)).collect();
                tape.cross_entropy_with_l2(p, target, &ws, l2)
            },
            GRAD_TOLERANCE,
        )?;
        acc.record(&report);
    }
    out.push(acc.finish());

    let mut acc = Accumulator::new("classifier_stack");
    let mut rng = seed::rng(seed_value, &[9]);
    for _ in 0..instances {
        let specs = [
            LayerSpec::conv3(3),
            LayerSpec::Relu,
            LayerSpec::Maxpool2,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { units: 4 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 2 },
            LayerSpec::Softmax,
        ];
        let mut store = ParamStore::new();
        let stack = Stack::build("net", &specs, &[4, 4, 1], &mut store, &mut rng)?;
        let input = uniform_tensor(&mut rng, &[4, 4, 1], 0.0, 1.0);
        let target = rng.gen_range(0..2);
        let weights = stack.weight_ids();
        let report = finite_difference_check(
            &store,
            &input,
            |tape, store, x| {
                let mut unused = seed::rng(0, &[]);
                let p = stack.forward(tape, store, x, Mode::Eval, &mut unused)?;
                let ws: Vec<Var> = weights.iter().map(|&id| tape.param(store, id)).collect();
                tape.cross_entropy_with_l2(p, target, &ws, 0.005)
            },
            GRAD_TOLERANCE,
        )?;
        acc.record(&report);
    }
    out.push(acc.finish());

    let mut acc = Accumulator::new("detector_loss");
    let mut rng = seed::rng(seed_value, &[10]);
    for _ in 0..instances {
        let grid = rng.gen_range(1..=3);
        let anchors = rng.gen_range(1..=2);
        let slots = grid * grid * anchors;
        let kinds = (0..slots)
            .map(|_| match rng.gen_range(0..3) {
                0 => SlotKind::Positive,
                1 => SlotKind::Ignore,
                _ => SlotKind::Negative,
            })
            .collect();
        let values = (0..slots)
            .map(|_| {
                [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let targets = Targets {
            grid,
            anchors,
            kinds,
            values,
        };
        let weights = LossWeights {
            coord: rng.gen_range(0.5..5.0),
            noobj: rng.gen_range(0.1..1.0),
        };
        let head = LayerSpec::Conv2d {
            filters: anchors * SLOT_VALUES,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let channels = rng.gen_range(1..=3);
        let (store, stack) = single_layer(head, &[grid, grid, channels], &mut rng)?;
        let input = uniform_tensor(&mut rng, &[grid, grid, channels], -1.0, 1.0);
        let report = finite_difference_check(
            &store,
            &input,
            |tape, store, x| {
                let mut unused = seed::rng(0, &[]);
                let pred = stack.forward(tape, store, x, Mode::Eval, &mut unused)?;
                detector_loss_var(tape, pred, &targets, &weights)
            },
            GRAD_TOLERANCE,
        )?;
        acc.record(&report);
    }
    out.push(acc.finish());

    Ok(out)
}

/// AP by exhaustive recomputation: for each rank cut-off, precision and
/// recall from a direct count, then the all-point interpolated area.
pub fn brute_force_ap(images: &[ImageResult], iou_threshold: f64) -> Option<f64> {
    let total_gt: usize = images.iter().map(|im| im.ground_truth.len()).sum();
    if total_gt == 0 {
        return None;
    }
    let overlap = |a: &Rect, b: &Rect| {
        let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
        let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
        let inter = iw * ih;
        let union = a.width() * a.height() + b.width() * b.height() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    };
    let mut flat: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (ii, im) in images.iter().enumerate() {
        let mut order: Vec<usize> = (0..im.detections.len()).collect();
        order.sort_by(|&a, &b| im.detections[b].confidence.total_cmp(&im.detections[a].confidence).then(a.cmp(&b)));
        let mut taken = vec![false; im.ground_truth.len()];
        for di in order {
            let d = &im.detections[di].bbox;
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in im.ground_truth.iter().enumerate() {
                let v = overlap(d, g);
                if !taken[gi] && best.map_or(true, |(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            let tp = match best {
                Some((gi, v)) if v >= iou_threshold => {
                    taken[gi] = true;
                    true
                }
                _ => false,
            };
            flat.push((im.detections[di].confidence, ii, di, tp));
        }
    }
    flat.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let points: Vec<(f64, f64)> = (1..=flat.len())
        .map(|k| {
            let tp = flat[..k].iter().filter(|d| d.3).count() as f64;
            (tp / total_gt as f64, tp / k as f64)
        })
        .collect();
    // area = sum over recall steps of the best precision at any recall >= r
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            let best = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            area += (r - prev_recall) * best;
            prev_recall = r;
        }
    }
    Some(area)
}

/// Random scene for AP checks: a few images, boxes on a coarse grid so
/// that IoU ties and exact threshold hits occur.
pub fn random_scene(rng: &mut ChaCha8Rng) -> Vec<ImageResult> {
    let n_images = rng.gen_range(1..=4);
    (0..n_images)
        .map(|_| {
            let rect = |rng: &mut ChaCha8Rng| {
                let x = rng.gen_range(0..8) as f64 * 4.0;
                let y = rng.gen_range(0..8) as f64 * 4.0;
                let w = rng.gen_range(1..=4) as f64 * 4.0;
                let h = rng.gen_range(1..=4) as f64 * 4.0;
                Rect::new(x, y, x + w, y + h)
            };
            let ground_truth: Vec<Rect> = (0..rng.gen_range(0..=4)).map(|_| rect(rng)).collect();
            let detections = (0..rng.gen_range(0..=6))
                .map(|_| {
                    let bbox = if !ground_truth.is_empty() && rng.gen_bool(0.6) {
                        let g = ground_truth[rng.gen_range(0..ground_truth.len())];
                        let dx = rng.gen_range(-1..=1) as f64 * 2.0;
                        Rect::new(g.x_min + dx, g.y_min, g.x_max + dx, g.y_max)
                    } else {
                        rect(rng)
                    };
                    // coarse confidences produce ties
                    Detection::new(bbox, rng.gen_range(1..=10) as f64 / 10.0)
                })
                .collect();
            ImageResult {
                detections,
                ground_truth,
            }
        })
        .collect()
}

/// Compares [`average_precision`] with [`brute_force_ap`] on random scenes.
pub fn ap_oracle_suite(instances: usize, seed_value: u64) -> Result<SuiteEntry> {
    let mut rng = seed::rng(seed_value, &[20]);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut agree = true;
    while checked < instances {
        let scene = random_scene(&mut rng);
        let thr = [0.3, 0.5, 0.75][rng.gen_range(0..3)];
        let Some(expected) = brute_force_ap(&scene, thr) else {
            agree &= average_precision(&scene, thr).is_err();
            continue;
        };
        let got = average_precision(&scene, thr)?;
        worst = worst.max((got - expected).abs());
        checked += 1;
    }
    Ok(SuiteEntry {
        name: "average_precision".into(),
        instances,
        worst,
        passed: agree && worst <= 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_matches_hand_example() {
        // two GT, detections TP(0.9) FP(0.8) TP(0.7): AP = 0.5 * 1 + 0.5 * 2/3
        let g = vec![Rect::new(0.0, 0.0, 10.0, 10.0), Rect::new(20.0, 20.0, 30.0, 30.0)];
        let images = vec![ImageResult {
            detections: vec![
                Detection::new(g[0], 0.9),
                Detection::new(Rect::new(50.0, 50.0, 60.0, 60.0), 0.8),
                Detection::new(g[1], 0.7),
            ],
            ground_truth: g,
        }];
        let ap = brute_force_ap(&images, 0.5).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }
}
