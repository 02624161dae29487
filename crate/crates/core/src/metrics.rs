//! Detection evaluation: greedy matching, all-point average precision,
//! F1 and average IoU at fixed thresholds, IoU-threshold sweeps and
//! best-checkpoint selection.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Detection, Rect};

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Rect>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetectionOutcome {
    TruePositive { gt: usize, iou: f64 },
    FalsePositive,
}

impl DetectionOutcome {
    pub fn is_tp(&self) -> bool {
        matches!(self, DetectionOutcome::TruePositive { .. })
    }
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indexed like the input detections.
    pub outcomes: Vec<DetectionOutcome>,
    /// Input indices in processing order (descending confidence).
    pub order: Vec<usize>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_tp()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.outcomes.len() - self.true_positives()
    }

    pub fn missed(&self) -> usize {
        self.gt_matched.iter().filter(|m| !**m).count()
    }
}

/// Descending confidence; equal confidences keep ascending index order.
fn by_confidence(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Greedy matching: in descending confidence order each detection takes the
/// unmatched ground-truth box with the highest IoU (lowest index on ties);
/// it is a true positive when that IoU reaches `iou_threshold`.
pub fn match_detections(detections: &[Detection], ground_truth: &[Rect], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| by_confidence(detections[a].confidence, detections[b].confidence));
    let mut outcomes = vec![DetectionOutcome::FalsePositive; detections.len()];
    let mut gt_matched = vec![false; ground_truth.len()];
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if gt_matched[g] {
                continue;
            }
            let v = detections[d].bbox.iou_unchecked(gt);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= iou_threshold {
                gt_matched[g] = true;
                outcomes[d] = DetectionOutcome::TruePositive { gt: g, iou: v };
            }
        }
    }
    MatchResult {
        outcomes,
        order,
        gt_matched,
    }
}

/// One point of a precision/recall curve, after the detection of rank
/// `rank` (1-based) in global confidence order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub rank: usize,
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

fn total_gt(images: &[ImageResult]) -> Result<usize> {
    let n: usize = images.iter().map(|i| i.ground_truth.len()).sum();
    if n == 0 {
        Err(Error::Input("evaluation needs at least one ground-truth box".into()))
    } else {
        Ok(n)
    }
}

/// Cumulative precision/recall over all detections of all images, sorted
/// globally by confidence (ties: image index, then detection index).
pub fn pr_curve(images: &[ImageResult], iou_threshold: f64) -> Result<Vec<PrPoint>> {
    let n_gt = total_gt(images)? as f64;
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let m = match_detections(&img.detections, &img.ground_truth, iou_threshold);
        for (d, det) in img.detections.iter().enumerate() {
            ranked.push((det.confidence, i, d, m.outcomes[d].is_tp()));
        }
    }
    ranked.sort_by(|a, b| by_confidence(a.0, b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut tp = 0usize;
    Ok(ranked
        .iter()
        .enumerate()
        .map(|(k, &(confidence, _, _, is_tp))| {
            tp += usize::from(is_tp);
            PrPoint {
                rank: k + 1,
                confidence,
                precision: tp as f64 / (k + 1) as f64,
                recall: tp as f64 / n_gt,
            }
        })
        .collect())
}

/// Area under the precision envelope (all-point interpolation).
pub fn average_precision(images: &[ImageResult], iou_threshold: f64) -> Result<f64> {
    let curve = pr_curve(images, iou_threshold)?;
    Ok(envelope_area(&curve))
}

fn envelope_area(curve: &[PrPoint]) -> f64 {
    let mut recall = Vec::with_capacity(curve.len() + 2);
    let mut precision = Vec::with_capacity(curve.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    for p in curve {
        recall.push(p.recall);
        precision.push(p.precision);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .filter(|&i| recall[i] != recall[i - 1])
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Precision, recall and F1 of the detections with confidence at or above
/// `conf_threshold`.
pub fn f1_at(images: &[ImageResult], iou_threshold: f64, conf_threshold: f64) -> Result<PrecisionRecall> {
    let n_gt = total_gt(images)?;
    let mut tp = 0;
    let mut fp = 0;
    for img in images {
        let kept: Vec<Detection> = img
            .detections
            .iter()
            .filter(|d| d.confidence >= conf_threshold)
            .copied()
            .collect();
        let m = match_detections(&kept, &img.ground_truth, iou_threshold);
        tp += m.true_positives();
        fp += m.false_positives();
    }
    Ok(precision_recall(tp, fp, n_gt - tp))
}

pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> PrecisionRecall {
    let (precision, recall, f1) = if tp == 0 {
        (0.0, 0.0, 0.0)
    } else {
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / (tp + fn_) as f64;
        (p, r, 2.0 * p * r / (p + r))
    };
    PrecisionRecall {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvgIou {
    pub value: f64,
    pub count: usize,
    /// No detection reached the confidence threshold.
    pub empty: bool,
}

/// Mean over detections at or above `conf_threshold` of each detection's
/// best IoU against any ground-truth box of its image.
pub fn avg_iou(images: &[ImageResult], conf_threshold: f64) -> AvgIou {
    let mut total = 0.0;
    let mut count = 0;
    for img in images {
        for d in img.detections.iter().filter(|d| d.confidence >= conf_threshold) {
            total += img
                .ground_truth
                .iter()
                .map(|g| d.bbox.iou_unchecked(g))
                .fold(0.0, f64::max);
            count += 1;
        }
    }
    AvgIou {
        value: if count == 0 { 0.0 } else { total / count as f64 },
        count,
        empty: count == 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub iou_threshold: f64,
    pub ap: f64,
    pub f1: f64,
    pub avg_iou: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub conf_threshold: f64,
    pub records: Vec<ThresholdRecord>,
    /// One precision/recall curve per IoU threshold, same order as `records`.
    pub pr_curves: Vec<Vec<PrPoint>>,
}

/// IoU thresholds 0.10, 0.20, ..., 0.90.
pub fn default_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

pub fn threshold_sweep(images: &[ImageResult], thresholds: &[f64], conf_threshold: f64) -> Result<MetricsReport> {
    if thresholds.is_empty() {
        return Err(Error::Input("threshold sweep needs at least one threshold".into()));
    }
    if thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) || thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input(format!(
            "thresholds must be strictly increasing inside (0, 1): {thresholds:?}"
        )));
    }
    let avg = avg_iou(images, conf_threshold);
    let mut records = Vec::with_capacity(thresholds.len());
    let mut pr_curves = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let curve = pr_curve(images, t)?;
        let point = f1_at(images, t, conf_threshold)?;
        records.push(ThresholdRecord {
            iou_threshold: t,
            ap: envelope_area(&curve),
            f1: point.f1,
            avg_iou: avg.value,
            precision: point.precision,
            recall: point.recall,
        });
        pr_curves.push(curve);
    }
    Ok(MetricsReport {
        conf_threshold,
        records,
        pr_curves,
    })
}

impl MetricsReport {
    pub fn record_at(&self, iou_threshold: f64) -> Option<&ThresholdRecord> {
        self.records
            .iter()
            .find(|r| (r.iou_threshold - iou_threshold).abs() < 1e-9)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,ap,f1,avg_iou,precision,recall\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{:.2},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.iou_threshold, r.ap, r.f1, r.avg_iou, r.precision, r.recall
            );
        }
        out
    }

    pub fn pr_curves_csv(&self) -> String {
        let mut out = String::from("iou_threshold,rank,confidence,precision,recall\n");
        for (r, curve) in self.records.iter().zip(&self.pr_curves) {
            for p in curve {
                let _ = writeln!(
                    out,
                    "{:.2},{},{:.6},{:.6},{:.6}",
                    r.iou_threshold, p.rank, p.confidence, p.precision, p.recall
                );
            }
        }
        out
    }
}

/// One row of a detector training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub val_ap50: Option<f64>,
}

/// Iteration with the highest validation AP; the earliest wins ties.
pub fn select_checkpoint(log: &[IterationRecord]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for r in log {
        if let Some(ap) = r.val_ap50 {
            if best.map_or(true, |(_, b)| ap > b) {
                best = Some((r.iteration, ap));
            }
        }
    }
    best.map(|(it, _)| it)
        .ok_or_else(|| Error::Input("iteration log has no validation AP entries".into()))
}
