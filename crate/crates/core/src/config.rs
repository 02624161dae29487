//! Run configuration: every tunable of a pipeline run in one TOML file,
//! with two named presets.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, PretextConfig};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::metrics::default_thresholds;
use crate::phantom::PhantomConfig;
use crate::seed;

/// Stream tag separating the detection phantom set from the
/// classification set.
const DETECTION_SET: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 64-pixel phantoms and shortened training.
    Desk,
    /// Input sizes and iteration counts of the original setup.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Classification dataset root; generated under the output root when unset.
    pub classification_dir: Option<PathBuf>,
    /// Detection dataset root; generated under the output root when unset.
    pub detection_dir: Option<PathBuf>,
    pub classification_train_fraction: f64,
    pub detection_train_fraction: f64,
    /// Positive-only phantom images generated for detection.
    pub detection_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classification_dir: None,
            detection_dir: None,
            classification_train_fraction: 0.8,
            detection_train_fraction: 573.0 / 673.0,
            detection_images: 673,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Confidence threshold of the point metrics (F1, average IoU).
    pub conf_threshold: f64,
    /// Trailing epochs averaged when ranking classifier runs.
    pub rank_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: default_thresholds(),
            conf_threshold: 0.25,
            rank_window: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    pub data: DataConfig,
    pub phantom: PhantomConfig,
    pub classifier: ClassifierConfig,
    pub pretext: PretextConfig,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
    pub fusion: FusionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Profile::Desk)
    }
}

impl RunConfig {
    pub fn preset(profile: Profile) -> Self {
        let base = Self {
            seed: 7,
            profile,
            data: DataConfig::default(),
            phantom: PhantomConfig::default(),
            classifier: ClassifierConfig::default(),
            pretext: PretextConfig::default(),
            detector: DetectorConfig::default(),
            eval: EvalConfig::default(),
            fusion: FusionConfig::default(),
        };
        match profile {
            Profile::Desk => Self {
                classifier: ClassifierConfig {
                    learning_rate: 1e-3,
                    ..base.classifier
                },
                detector: DetectorConfig {
                    iterations: 1500,
                    eval_every: 100,
                    ..base.detector
                },
                ..base
            },
            Profile::Paper => Self {
                phantom: PhantomConfig {
                    image_size: 416,
                    ..base.phantom
                },
                classifier: ClassifierConfig {
                    input_size: 224,
                    ..base.classifier
                },
                detector: DetectorConfig {
                    input_size: 416,
                    widths: vec![16, 32, 64, 128, 256],
                    neck_filters: 256,
                    eval_every: 200,
                    ..base.detector
                },
                ..base
            },
        }
    }

    /// Preset of `profile` with the values of a TOML document laid over it;
    /// keys absent from the document keep the preset value.
    pub fn from_toml(text: &str, profile: Profile) -> Result<Self> {
        let overlay: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        let profile = match overlay.get("profile").and_then(|v| v.as_str()) {
            Some(p) => p.parse()?,
            None => profile,
        };
        let mut merged = toml::Table::try_from(Self::preset(profile)).expect("preset serializes");
        merge(&mut merged, overlay);
        let config: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, profile: Profile) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, profile)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.classifier.validate()?;
        self.detector.validate()?;
        self.fusion.validate()?;
        let fractions = [
            self.data.classification_train_fraction,
            self.data.detection_train_fraction,
        ];
        if fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::Config("train fractions must lie in (0, 1)".into()));
        }
        if self.data.detection_images == 0 {
            return Err(Error::Config("detection_images must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.conf_threshold) || self.eval.rank_window == 0 {
            return Err(Error::Config("eval conf_threshold must lie in [0, 1] and rank_window >= 1".into()));
        }
        Ok(())
    }

    /// Classification phantom set, seeded by the run seed.
    pub fn classification_phantom(&self) -> PhantomConfig {
        PhantomConfig {
            seed: self.seed,
            ..self.phantom.clone()
        }
    }

    /// Positive-only detection phantom set on its own seed stream.
    pub fn detection_phantom(&self) -> PhantomConfig {
        PhantomConfig {
            seed: seed::derive(self.seed, &[DETECTION_SET]),
            n_positive: self.data.detection_images,
            n_negative: 0,
            ..self.phantom.clone()
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        for profile in [Profile::Desk, Profile::Paper] {
            let cfg = RunConfig::preset(profile);
            cfg.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&cfg.to_toml(), Profile::Desk).unwrap(), cfg);
        }
    }

    #[test]
    fn overlay_keeps_unlisted_values() {
        let cfg = RunConfig::from_toml("seed = 9\n[detector]\niterations = 5\n", Profile::Desk).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.detector.iterations, 5);
        assert_eq!(cfg.detector.momentum, 0.949);
        assert_eq!(cfg.classifier.learning_rate, 1e-3);
        let paper = RunConfig::from_toml("profile = \"paper\"\n", Profile::Desk).unwrap();
        assert_eq!(paper.detector.input_size, 416);
        assert_eq!(paper.detector.grid(), 13);
    }

    #[test]
    fn paper_hyperparameters_are_defaults() {
        let cfg = RunConfig::preset(Profile::Paper);
        assert_eq!(cfg.classifier.learning_rate, 1e-4);
        assert_eq!(cfg.classifier.dropout, 0.4);
        assert_eq!(cfg.classifier.l2, 0.005);
        assert_eq!(cfg.detector.learning_rate, 0.001);
        assert_eq!(cfg.detector.momentum, 0.949);
        assert_eq!(cfg.detector.iterations, 10_000);
        assert_eq!(cfg.classifier.input_size, 224);
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(matches!(
            RunConfig::from_toml("[fusion]\ntau_cls = 2.0\n", Profile::Desk),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml("seed = \"x\"", Profile::Desk).is_err());
        assert!("laptop".parse::<Profile>().is_err());
    }

    #[test]
    fn detection_split_sizes() {
        let cfg = RunConfig::default();
        let n = cfg.data.detection_images as f64;
        assert_eq!((n * cfg.data.detection_train_fraction).round(), 573.0);
    }
}
