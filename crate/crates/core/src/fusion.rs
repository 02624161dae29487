//! Combined verdict from the classifier's probability pair and the
//! detector's regions of interest.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierOutput;
use crate::error::{Error, Result};
use crate::geometry::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub tau_cls: f64,
    pub tau_det: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            tau_cls: 0.5,
            tau_det: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_cls", self.tau_cls), ("tau_det", self.tau_det)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Ordered `Negative < Discordant < Positive`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Negative,
    Discordant,
    Positive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Negative => "negative",
            Verdict::Discordant => "discordant",
            Verdict::Positive => "positive",
        })
    }
}

/// R1: both sources fire. R2: neither fires. R3: exactly one fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    R1,
    R2,
    R3,
}

impl Rule {
    /// Re-evaluates this rule on recorded scores; `Some` when it fires.
    pub fn evaluate(self, p_yes: f64, max_det_conf: f64, cfg: &FusionConfig) -> Option<Verdict> {
        let cls = p_yes >= cfg.tau_cls;
        let det = max_det_conf >= cfg.tau_det;
        match self {
            Rule::R1 if cls && det => Some(Verdict::Positive),
            Rule::R2 if !cls && !det => Some(Verdict::Negative),
            Rule::R3 if cls != det => Some(Verdict::Discordant),
            _ => None,
        }
    }
}

/// One fired rule with the scores and thresholds it saw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleFiring {
    pub rule: Rule,
    pub p_yes: f64,
    pub max_det_conf: f64,
    pub tau_cls: f64,
    pub tau_det: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedVerdict {
    pub verdict: Verdict,
    pub p_yes: f64,
    pub p_no: f64,
    /// Every detection, including those below `tau_det`.
    pub detections: Vec<Detection>,
    pub max_det_conf: f64,
    pub rule_trace: Vec<RuleFiring>,
}

impl FusedVerdict {
    /// True when the last traced rule, re-run on its recorded scores,
    /// yields the stored verdict.
    pub fn is_explained(&self) -> bool {
        self.rule_trace.last().is_some_and(|f| {
            let cfg = FusionConfig {
                tau_cls: f.tau_cls,
                tau_det: f.tau_det,
            };
            f.rule.evaluate(f.p_yes, f.max_det_conf, &cfg) == Some(self.verdict)
        })
    }
}

/// Applies R1, R2, R3 in order; the first rule that fires decides.
pub fn fuse(cls: &ClassifierOutput, detections: &[Detection], cfg: &FusionConfig) -> Result<FusedVerdict> {
    cfg.validate()?;
    let max_det_conf = detections.iter().map(|d| d.confidence).fold(0.0, f64::max);
    let (rule, verdict) = [Rule::R1, Rule::R2, Rule::R3]
        .into_iter()
        .find_map(|r| r.evaluate(cls.p_yes, max_det_conf, cfg).map(|v| (r, v)))
        .ok_or_else(|| Error::Numeric(format!("no rule fired for p_yes {} max_det_conf {max_det_conf}", cls.p_yes)))?;
    Ok(FusedVerdict {
        verdict,
        p_yes: cls.p_yes,
        p_no: cls.p_no,
        detections: detections.to_vec(),
        max_det_conf,
        rule_trace: vec![RuleFiring {
            rule,
            p_yes: cls.p_yes,
            max_det_conf,
            tau_cls: cfg.tau_cls,
            tau_det: cfg.tau_det,
        }],
    })
}

#[derive(Serialize)]
struct DetectionRecord {
    confidence: f64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Serialize)]
struct VerdictRecord<'a> {
    image: &'a str,
    verdict: Verdict,
    p_yes: f64,
    p_no: f64,
    max_det_conf: f64,
    detections: Vec<DetectionRecord>,
    rule_trace: &'a [RuleFiring],
}

/// One JSON object on one line, without a trailing newline.
pub fn verdict_record(image: &str, v: &FusedVerdict) -> String {
    let record = VerdictRecord {
        image,
        verdict: v.verdict,
        p_yes: v.p_yes,
        p_no: v.p_no,
        max_det_conf: v.max_det_conf,
        detections: v
            .detections
            .iter()
            .map(|d| DetectionRecord {
                confidence: d.confidence,
                bbox: [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max],
            })
            .collect(),
        rule_trace: &v.rule_trace,
    };
    serde_json::to_string(&record).expect("verdict serializes")
}
