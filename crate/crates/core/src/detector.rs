//! Single-class one-stage detector over an anchor grid.
//!
//! A conv backbone reduces the image by `2^blocks`; a 1x1 head emits
//! `(tx, ty, tw, th, objectness)` per cell and anchor. Anchors come from
//! k-medoids over training box sizes with a `1 - IoU` distance.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::augment_detection;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::geometry::{centered_iou, Detection, Rect};
use crate::metrics::{average_precision, select_checkpoint, ImageResult, IterationRecord};
use crate::seed::{self, tag};
use crate::tensor::ops::{sigmoid, softplus};
use crate::tensor::{accumulate_batch, Checkpoint, LayerSpec, Mode, OptimizerState, ParamStore, Real, Stack, Tape, Tensor, Var};

pub const NET_PREFIX: &str = "det";
/// Values per anchor slot: tx, ty, tw, th, objectness logit.
pub const SLOT_VALUES: usize = 5;
/// Initial objectness bias, so that untrained cells start near p = 0.02.
const OBJ_BIAS_INIT: f64 = -4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub input_size: usize,
    /// Filters of each conv/relu/maxpool block; the stride is `2^len`.
    pub widths: Vec<usize>,
    /// Filters of the unpooled conv before the 1x1 head.
    pub neck_filters: usize,
    pub anchor_count: usize,
    pub anchor_iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations of quartic learning-rate warm-up.
    pub burn_in: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub hflip_prob: f64,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub ignore_iou: f64,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Confidence floor for detections that enter AP computation.
    pub eval_conf_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            widths: vec![16, 32, 64],
            neck_filters: 64,
            anchor_count: 3,
            anchor_iterations: 100,
            learning_rate: 0.001,
            momentum: 0.949,
            weight_decay: 0.0005,
            burn_in: 100,
            iterations: 10_000,
            batch_size: 16,
            eval_every: 100,
            hflip_prob: 0.5,
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            ignore_iou: 0.5,
            conf_threshold: 0.25,
            nms_iou: 0.45,
            eval_conf_threshold: 0.005,
        }
    }
}

impl DetectorConfig {
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.stride()
    }

    pub fn validate(&self) -> Result<()> {
        let stride = self.stride();
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(Error::Config(format!(
                "detector input size {} must be a positive multiple of the stride {stride}",
                self.input_size
            )));
        }
        if self.widths.iter().chain([&self.neck_filters]).any(|&w| w == 0) || self.anchor_count == 0 {
            return Err(Error::Config("detector filters and anchor count must be >= 1".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch size and eval interval must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "invalid optimizer settings: lr {} momentum {} decay {}",
                self.learning_rate, self.momentum, self.weight_decay
            )));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if ![self.hflip_prob, self.ignore_iou, self.conf_threshold, self.nms_iou, self.eval_conf_threshold]
            .into_iter()
            .all(unit)
        {
            return Err(Error::Config("detector probabilities and thresholds must lie in [0, 1]".into()));
        }
        if self.lambda_coord < 0.0 || self.lambda_noobj < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }

    pub fn net_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for &w in &self.widths {
            specs.extend([LayerSpec::conv3(w), LayerSpec::Relu, LayerSpec::Maxpool2]);
        }
        specs.extend([
            LayerSpec::conv3(self.neck_filters),
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                filters: self.anchor_count * SLOT_VALUES,
                kernel: 1,
                stride: 1,
                padding: 0,
            },
        ]);
        specs
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            coord: self.lambda_coord,
            noobj: self.lambda_noobj,
        }
    }
}

/// Prior box sizes in input pixels, sorted ascending by area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<(f64, f64)>,
}

impl AnchorSet {
    pub fn new(mut anchors: Vec<(f64, f64)>, input_size: usize) -> Result<Self> {
        let limit = input_size as f64;
        if anchors.is_empty() {
            return Err(Error::Input("anchor set is empty".into()));
        }
        if let Some(a) = anchors
            .iter()
            .find(|(w, h)| !(*w > 0.0 && *h > 0.0 && *w <= limit && *h <= limit))
        {
            return Err(Error::Input(format!("anchor {a:?} outside (0, {limit}]")));
        }
        anchors.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
        Ok(Self { anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Index of the anchor with the highest co-centered IoU (lowest on ties).
    pub fn best_match(&self, w: f64, h: f64) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &(aw, ah)) in self.anchors.iter().enumerate() {
            let v = centered_iou(w, h, aw, ah);
            if v > best.1 {
                best = (i, v);
            }
        }
        best.0
    }
}

fn size_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    1.0 - centered_iou(a.0, a.1, b.0, b.1)
}

/// k-medoids over `(w, h)` with distance `1 - IoU` of co-centered boxes.
///
/// Seeds are picked k-means++ style from `seed`; each round assigns boxes
/// to the nearest anchor and moves every anchor to its cluster's medoid.
pub fn estimate_anchors(
    sizes: &[(f64, f64)],
    k: usize,
    iterations: usize,
    input_size: usize,
    seed_value: u64,
) -> Result<AnchorSet> {
    if k == 0 || sizes.len() < k {
        return Err(Error::Input(format!(
            "anchor estimation needs at least {k} boxes, got {}",
            sizes.len()
        )));
    }
    if let Some(s) = sizes.iter().find(|(w, h)| !(*w > 0.0 && *h > 0.0)) {
        return Err(Error::Input(format!("degenerate box size {s:?}")));
    }
    let mut rng = seed::rng(seed_value, &[tag::INIT, tag::ANCHORS]);
    let mut centers = vec![sizes[rng.gen_range(0..sizes.len())]];
    while centers.len() < k {
        let weights: Vec<f64> = sizes
            .iter()
            .map(|&s| centers.iter().map(|&c| size_distance(s, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = sizes.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..sizes.len())
        };
        centers.push(sizes[pick]);
    }

    let nearest = |s: (f64, f64), centers: &[(f64, f64)]| {
        let mut best = (0, f64::INFINITY);
        for (j, &c) in centers.iter().enumerate() {
            let d = size_distance(s, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    };
    let mut assignment: Vec<usize> = sizes.iter().map(|&s| nearest(s, &centers)).collect();
    for _ in 0..iterations {
        for (j, center) in centers.iter_mut().enumerate() {
            let members: Vec<(f64, f64)> = sizes
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == j)
                .map(|(&s, _)| s)
                .collect();
            let mut best = (*center, f64::INFINITY);
            for &m in &members {
                let cost: f64 = members.iter().map(|&o| size_distance(m, o)).sum();
                if cost < best.1 {
                    best = (m, cost);
                }
            }
            *center = best.0;
        }
        let next: Vec<usize> = sizes.iter().map(|&s| nearest(s, &centers)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    AnchorSet::new(centers, input_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    Negative,
    Positive,
    Ignore,
}

/// Per-slot regression targets and roles; slot index is
/// `(row * grid + col) * anchors + anchor`.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub grid: usize,
    pub anchors: usize,
    pub kinds: Vec<SlotKind>,
    /// Cell-relative x, y and log size ratios w, h; zero for non-positives.
    pub values: Vec<[f64; 4]>,
}

impl Targets {
    pub fn positives(&self) -> usize {
        self.kinds.iter().filter(|k| **k == SlotKind::Positive).count()
    }

    pub fn slot(&self, row: usize, col: usize, anchor: usize) -> usize {
        (row * self.grid + col) * self.anchors + anchor
    }
}

/// Assigns each box to the cell holding its center and the anchor with the
/// best co-centered IoU. When two boxes claim the same slot the first keeps
/// it. Unassigned slots whose anchor prior, centered on the cell, overlaps
/// some box with IoU above `ignore_iou` are ignored.
pub fn encode_targets(
    boxes: &[Rect],
    anchors: &AnchorSet,
    grid: usize,
    input_size: usize,
    ignore_iou: f64,
) -> Result<Targets> {
    if grid == 0 || input_size % grid != 0 {
        return Err(Error::Dimension(format!("grid {grid} does not divide input {input_size}")));
    }
    let stride = (input_size / grid) as f64;
    let limit = input_size as f64 + 1e-6;
    let a = anchors.len();
    let mut kinds = vec![SlotKind::Negative; grid * grid * a];
    let mut values = vec![[0.0; 4]; grid * grid * a];
    for b in boxes {
        if !b.is_valid() || b.x_min < -1e-6 || b.y_min < -1e-6 || b.x_max > limit || b.y_max > limit {
            return Err(Error::Input(format!("box {b:?} is degenerate or outside the image")));
        }
        let (cx, cy) = b.center();
        let (gx, gy) = (cx / stride, cy / stride);
        let col = (gx.floor() as usize).min(grid - 1);
        let row = (gy.floor() as usize).min(grid - 1);
        let best = anchors.best_match(b.width(), b.height());
        let slot = (row * grid + col) * a + best;
        if kinds[slot] == SlotKind::Positive {
            continue;
        }
        let (aw, ah) = anchors.anchors[best];
        kinds[slot] = SlotKind::Positive;
        values[slot] = [
            gx - col as f64,
            gy - row as f64,
            (b.width() / aw).ln(),
            (b.height() / ah).ln(),
        ];
    }
    if !boxes.is_empty() {
        for row in 0..grid {
            for col in 0..grid {
                for (j, &(aw, ah)) in anchors.anchors.iter().enumerate() {
                    let slot = (row * grid + col) * a + j;
                    if kinds[slot] == SlotKind::Positive {
                        continue;
                    }
                    let prior = Rect::from_center((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride, aw, ah);
                    if boxes.iter().any(|b| prior.iou_unchecked(b) > ignore_iou) {
                        kinds[slot] = SlotKind::Ignore;
                    }
                }
            }
        }
    }
    Ok(Targets {
        grid,
        anchors: a,
        kinds,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub coord: f64,
    pub noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { coord: 5.0, noobj: 0.5 }
    }
}

/// Loss value and its gradient with respect to the raw head output.
///
/// `coord * sum_pos[(s(tx)-x)^2 + (s(ty)-y)^2 + (tw-w)^2 + (th-h)^2]
///  + sum_pos BCE(obj, 1) + noobj * sum_neg BCE(obj, 0)`.
pub fn detector_loss<F: Real>(pred: &[F], targets: &Targets, weights: &LossWeights) -> Result<(F, Vec<F>)> {
    let slots = targets.kinds.len();
    if pred.len() != slots * SLOT_VALUES {
        return Err(Error::Dimension(format!(
            "prediction has {} values, targets describe {slots} slots",
            pred.len()
        )));
    }
    let coord = F::lit(weights.coord);
    let noobj = F::lit(weights.noobj);
    let two = F::lit(2.0);
    let mut loss = F::zero();
    let mut grad = vec![F::zero(); pred.len()];
    for (s, kind) in targets.kinds.iter().enumerate() {
        let p = &pred[s * SLOT_VALUES..(s + 1) * SLOT_VALUES];
        let g = &mut grad[s * SLOT_VALUES..(s + 1) * SLOT_VALUES];
        let obj = p[4];
        match kind {
            SlotKind::Positive => {
                let t = targets.values[s].map(F::lit);
                for k in 0..2 {
                    let sg = sigmoid(p[k]);
                    let d = sg - t[k];
                    loss += coord * d * d;
                    g[k] = coord * two * d * sg * (F::one() - sg);
                }
                for k in 2..4 {
                    let d = p[k] - t[k];
                    loss += coord * d * d;
                    g[k] = coord * two * d;
                }
                loss += softplus(-obj);
                g[4] = sigmoid(obj) - F::one();
            }
            SlotKind::Negative => {
                loss += noobj * softplus(obj);
                g[4] = noobj * sigmoid(obj);
            }
            SlotKind::Ignore => {}
        }
    }
    Ok((loss, grad))
}

/// Records [`detector_loss`] on the tape as a function of `pred`.
pub fn detector_loss_var<F: Real>(
    tape: &mut Tape<'_, F>,
    pred: Var,
    targets: &Targets,
    weights: &LossWeights,
) -> Result<Var> {
    let (value, grad) = detector_loss(tape.value(pred).data(), targets, weights)?;
    tape.linearized(pred, value, grad)
}

/// Turns head output `S x S x (A*5)` into clipped boxes whose confidence
/// reaches `conf_threshold`.
pub fn decode<F: Real>(pred: &Tensor<F>, anchors: &AnchorSet, stride: usize, conf_threshold: f64) -> Result<Vec<Detection>> {
    let a = anchors.len();
    let shape = pred.shape();
    if shape.len() != 3 || shape[0] != shape[1] || shape[2] != a * SLOT_VALUES {
        return Err(Error::Dimension(format!(
            "decode expects S x S x {} predictions, got {shape:?}",
            a * SLOT_VALUES
        )));
    }
    let grid = shape[0];
    let s = stride as f64;
    let size = (grid * stride) as f64;
    let data = pred.data();
    let mut out = Vec::new();
    for row in 0..grid {
        for col in 0..grid {
            for (j, &(aw, ah)) in anchors.anchors.iter().enumerate() {
                let base = ((row * grid + col) * a + j) * SLOT_VALUES;
                let v = |k: usize| data[base + k].to_f64().unwrap_or(f64::NAN);
                let confidence = sigmoid(v(4));
                if !(confidence >= conf_threshold) {
                    continue;
                }
                let bx = (col as f64 + sigmoid(v(0))) * s;
                let by = (row as f64 + sigmoid(v(1))) * s;
                let bw = aw * v(2).exp();
                let bh = ah * v(3).exp();
                let bbox = Rect::from_center(bx, by, bw, bh).clip(size, size);
                if bbox.is_valid() {
                    out.push(Detection::new(bbox, confidence));
                }
            }
        }
    }
    Ok(out)
}

/// Greedy non-maximum suppression; the result is sorted by confidence
/// (stable for ties).
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| k.bbox.iou_unchecked(&d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub anchors: AnchorSet,
    pub store: ParamStore<f32>,
    net: Stack,
}

impl DetectorModel {
    /// Fresh network with He-uniform weights from `seed`.
    pub fn new(config: &DetectorConfig, anchors: AnchorSet, seed_value: u64) -> Result<Self> {
        config.validate()?;
        if anchors.len() != config.anchor_count {
            return Err(Error::Config(format!(
                "config expects {} anchors, got {}",
                config.anchor_count,
                anchors.len()
            )));
        }
        let mut rng = seed::rng(seed_value, &[tag::INIT]);
        let mut store = ParamStore::new();
        let input = [config.input_size, config.input_size, 1];
        let net = Stack::build(NET_PREFIX, &config.net_specs(), &input, &mut store, &mut rng)?;
        let head_bias = *net.param_ids().last().expect("head conv has a bias");
        for (i, b) in store.get_mut(head_bias).data_mut().iter_mut().enumerate() {
            if i % SLOT_VALUES == 4 {
                *b = OBJ_BIAS_INIT as f32;
            }
        }
        Ok(Self {
            config: config.clone(),
            anchors,
            store,
            net,
        })
    }

    pub fn stride(&self) -> usize {
        self.config.stride()
    }

    pub fn grid(&self) -> usize {
        self.config.grid()
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.net.output_shape()
    }

    /// Zeroes the 1x1 head so that every slot predicts neutral offsets and
    /// objectness 0.5.
    pub fn zero_head(&mut self) {
        let ids = self.net.param_ids();
        for &id in &ids[ids.len() - 2..] {
            self.store.get_mut(id).data_mut().fill(0.0);
        }
    }

    pub fn forward<'s>(&self, tape: &mut Tape<'s, f32>, store: &'s ParamStore<f32>, image: Var) -> Result<Var> {
        let mut unused = seed::rng(0, &[tag::EVAL]);
        self.net.forward(tape, store, image, Mode::Eval, &mut unused)
    }

    /// Raw head output for an image already at the input size.
    pub fn predict_raw(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.input(image.clone());
        let y = self.forward(&mut tape, &self.store, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<f32> {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let anchors = serde_json::to_string(&self.anchors).expect("anchors serialize");
        Checkpoint::new(self.store.clone())
            .with_meta("kind", "detector")
            .with_meta("config", config)
            .with_meta("anchors", anchors)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<f32>) -> Result<Self> {
        if ckpt.meta("kind") != Some("detector") {
            return Err(Error::Load(format!(
                "expected a detector checkpoint, found kind {:?}",
                ckpt.meta("kind")
            )));
        }
        let json = |key: &str| {
            ckpt.meta(key)
                .ok_or_else(|| Error::Load(format!("detector checkpoint lacks {key}")))
        };
        let config: DetectorConfig =
            serde_json::from_str(json("config")?).map_err(|e| Error::Load(format!("config: {e}")))?;
        let anchors: AnchorSet =
            serde_json::from_str(json("anchors")?).map_err(|e| Error::Load(format!("anchors: {e}")))?;
        let anchors = AnchorSet::new(anchors.anchors, config.input_size).map_err(|e| Error::Load(e.to_string()))?;
        let mut model = Self::new(&config, anchors, 0)?;
        if ckpt.params.len() != model.store.len() {
            return Err(Error::Load(format!(
                "checkpoint holds {} tensors, model has {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        model.store.copy_matching(&ckpt.params, "")?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Estimates anchors from the training boxes, then builds the network.
pub fn build_detector(config: &DetectorConfig, train: &[Sample], seed_value: u64) -> Result<DetectorModel> {
    config.validate()?;
    let n = config.input_size as f64;
    let sizes: Vec<(f64, f64)> = train
        .iter()
        .flat_map(|s| {
            let (sx, sy) = (n / s.image.width() as f64, n / s.image.height() as f64);
            s.boxes.iter().map(move |b| (b.width() * sx, b.height() * sy))
        })
        .collect();
    let anchors = estimate_anchors(&sizes, config.anchor_count, config.anchor_iterations, config.input_size, seed_value)?;
    DetectorModel::new(config, anchors, seed_value)
}

/// Image resized to the model input and boxes scaled with it.
fn fit_sample(image: &Tensor<f32>, boxes: &[Rect], n: usize) -> Result<(Tensor<f32>, Vec<Rect>)> {
    if image.shape().len() != 3 || image.shape()[2] != 1 {
        return Err(Error::Dimension(format!(
            "detector expects an HxWx1 image, got {:?}",
            image.shape()
        )));
    }
    if image.height() == n && image.width() == n {
        return Ok((image.clone(), boxes.to_vec()));
    }
    let (sx, sy) = (n as f64 / image.width() as f64, n as f64 / image.height() as f64);
    let boxes = boxes.iter().map(|b| b.scale(sx, sy)).collect();
    Ok((image.resize_bilinear(n, n)?, boxes))
}

/// Detections at `conf_threshold` after NMS, in the coordinates of the
/// original image.
pub fn detect_with_threshold(model: &DetectorModel, image: &Tensor<f32>, conf_threshold: f64) -> Result<Vec<Detection>> {
    let n = model.config.input_size;
    let (input, _) = fit_sample(image, &[], n)?;
    let raw = model.predict_raw(&input)?;
    let found = decode(&raw, &model.anchors, model.stride(), conf_threshold)?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    let (sx, sy) = (w / n as f64, h / n as f64);
    Ok(nms(&found, model.config.nms_iou)
        .into_iter()
        .map(|d| Detection::new(d.bbox.scale(sx, sy).clip(w, h), d.confidence))
        .collect())
}

/// Decode and NMS at the configured confidence threshold.
pub fn detect_image(model: &DetectorModel, image: &Tensor<f32>) -> Result<Vec<Detection>> {
    detect_with_threshold(model, image, model.config.conf_threshold)
}

/// Detections at the evaluation floor paired with ground truth, per sample.
pub fn evaluate_samples(model: &DetectorModel, samples: &[Sample]) -> Result<Vec<ImageResult>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(ImageResult {
                detections: detect_with_threshold(model, &s.image, model.config.eval_conf_threshold)?,
                ground_truth: s.boxes.clone(),
            })
        })
        .collect()
}

fn val_ap50(model: &DetectorModel, val: &[Sample]) -> Result<Option<f64>> {
    if val.iter().all(|s| s.boxes.is_empty()) {
        return Ok(None);
    }
    Ok(Some(average_precision(&evaluate_samples(model, val)?, 0.5)?))
}

#[derive(Debug, Clone)]
pub struct DetectorOutcome {
    pub log: Vec<IterationRecord>,
    /// Weights with the highest validation AP@0.5 (earliest on ties).
    pub best: Checkpoint<f32>,
    pub best_iteration: usize,
    pub best_ap50: Option<f64>,
}

/// Momentum SGD over minibatches drawn from per-epoch shuffles, with
/// horizontal flips. Every `eval_every` iterations the mean training loss
/// and validation AP@0.5 are logged and the best weights kept.
pub fn train_detector(
    model: &mut DetectorModel,
    train: &[Sample],
    val: &[Sample],
    seed_value: u64,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<DetectorOutcome> {
    let cfg = model.config.clone();
    cfg.validate()?;
    if train.is_empty() && cfg.iterations > 0 {
        return Err(Error::Input("detector training set is empty".into()));
    }
    let n = cfg.input_size;
    let fit = |samples: &[Sample]| -> Result<Vec<(Tensor<f32>, Vec<Rect>)>> {
        samples.par_iter().map(|s| fit_sample(&s.image, &s.boxes, n)).collect()
    };
    let train_data = fit(train)?;
    let weights = cfg.loss_weights();
    let arch = DetectorModel {
        config: cfg.clone(),
        anchors: model.anchors.clone(),
        store: ParamStore::new(),
        net: model.net.clone(),
    };
    let batch_loss = |store: &mut ParamStore<f32>, iteration: usize, batch: &[usize]| -> Result<f32> {
        let slots: Vec<(usize, usize)> = batch.iter().copied().enumerate().collect();
        accumulate_batch(store, &slots, |tape, store, &(slot, i)| {
            let mut rng = seed::rng(seed_value, &[tag::SAMPLE, iteration as u64, slot as u64]);
            let (img, boxes) = &train_data[i];
            let (img, boxes) = augment_detection(img, boxes, cfg.hflip_prob, &mut rng)?;
            let targets = encode_targets(&boxes, &arch.anchors, cfg.grid(), n, cfg.ignore_iou)?;
            let x = tape.input(img);
            let pred = arch.forward(tape, store, x)?;
            detector_loss_var(tape, pred, &targets, &weights)
        })
        .map_err(|e| Error::Training {
            stage: "detector",
            index: iteration,
            reason: e.to_string(),
        })
    };

    let mut epoch = 0u64;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut next_batch = || -> Vec<usize> {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                epoch += 1;
                order = (0..train_data.len()).collect();
                rand::seq::SliceRandom::shuffle(&mut order[..], &mut seed::rng(seed_value, &[tag::SHUFFLE, epoch]));
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        batch
    };

    let mut log = Vec::new();
    let initial_loss = if train_data.is_empty() {
        0.0
    } else {
        let probe: Vec<usize> = (0..cfg.batch_size.min(train_data.len())).collect();
        batch_loss(&mut model.store, 0, &probe)? as f64
    };
    let first = IterationRecord {
        iteration: 0,
        loss: initial_loss,
        val_ap50: val_ap50(model, val)?,
    };
    observer(&first);
    log.push(first);
    let mut best_store = model.store.clone();

    let mut optimizer = OptimizerState::sgd_momentum(cfg.learning_rate, cfg.momentum);
    optimizer.l2_coefficient = cfg.weight_decay;
    let mut window = (0.0, 0usize);
    for iteration in 1..=cfg.iterations {
        let batch = next_batch();
        let loss = batch_loss(&mut model.store, iteration, &batch)?;
        optimizer.learning_rate = if iteration < cfg.burn_in {
            cfg.learning_rate * (iteration as f64 / cfg.burn_in as f64).powi(4)
        } else {
            cfg.learning_rate
        };
        optimizer.step(&mut model.store).map_err(|e| Error::Training {
            stage: "detector",
            index: iteration,
            reason: e.to_string(),
        })?;
        window.0 += loss as f64;
        window.1 += 1;
        if iteration % cfg.eval_every == 0 || iteration == cfg.iterations {
            let record = IterationRecord {
                iteration,
                loss: window.0 / window.1 as f64,
                val_ap50: val_ap50(model, val)?,
            };
            window = (0.0, 0);
            observer(&record);
            let improves = match (record.val_ap50, log_best(&log)) {
                (Some(ap), Some(best)) => ap > best,
                (Some(_), None) => true,
                _ => false,
            };
            if improves {
                best_store = model.store.clone();
            }
            log.push(record);
        }
    }

    let best_iteration = select_checkpoint(&log).unwrap_or(0);
    let best_ap50 = log.iter().find(|r| r.iteration == best_iteration).and_then(|r| r.val_ap50);
    let mut best_model = model.clone();
    best_model.store = best_store;
    let best = best_model
        .to_checkpoint()
        .with_meta("iteration", best_iteration)
        .with_meta("val_ap50", best_ap50.map_or("none".to_string(), |v| v.to_string()))
        .with_meta("seed", seed_value);
    Ok(DetectorOutcome {
        log,
        best,
        best_iteration,
        best_ap50,
    })
}

fn log_best(log: &[IterationRecord]) -> Option<f64> {
    log.iter().filter_map(|r| r.val_ap50).reduce(f64::max)
}

/// `iteration,loss,val_ap50` with an empty AP field when not evaluated.
pub fn log_to_csv(log: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,loss,val_ap50\n");
    for r in log {
        let ap = r.val_ap50.map_or(String::new(), |v| format!("{v:.6}"));
        let _ = writeln!(out, "{},{:.6},{}", r.iteration, r.loss, ap);
    }
    out
}

pub fn log_from_csv(text: &str, path: &Path) -> Result<Vec<IterationRecord>> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "iteration,loss,val_ap50")) => {}
        _ => return Err(parse_err(1, "missing iteration,loss,val_ap50 header".into())),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let fields: Vec<&str> = l.split(',').collect();
            if fields.len() != 3 {
                return Err(parse_err(i + 1, format!("expected 3 fields, got {}", fields.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| parse_err(i + 1, format!("{s:?}: {e}")));
            Ok(IterationRecord {
                iteration: fields[0]
                    .trim()
                    .parse()
                    .map_err(|e| parse_err(i + 1, format!("iteration: {e}")))?,
                loss: num(fields[1])?,
                val_ap50: if fields[2].trim().is_empty() {
                    None
                } else {
                    Some(num(fields[2])?)
                },
            })
        })
        .collect()
}

/// One line per detection: `confidence x_min y_min x_max y_max`.
pub fn detections_to_text(detections: &[Detection]) -> String {
    let mut out = String::new();
    for d in detections {
        let b = &d.bbox;
        let _ = writeln!(
            out,
            "{:.4} {:.4} {:.4} {:.4} {:.4}",
            d.confidence, b.x_min, b.y_min, b.x_max, b.y_max
        );
    }
    out
}
