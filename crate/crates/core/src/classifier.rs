//! Transfer-learning image classifier.
//!
//! A small convolutional backbone is first trained on a phantom pretext
//! task (lesion-count buckets), then reused under a fresh two-way head
//! and fine-tuned on the PE / no-PE images.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_image, AugmentConfig};
use crate::dataset::{ClassLabel, Sample};
use crate::error::{Error, Result};
use crate::phantom::{generate_pretext_image, PhantomConfig, PRETEXT_BUCKETS};
use crate::seed::{self, tag};
use crate::tensor::{accumulate_batch, Checkpoint, LayerSpec, Mode, OptimizerState, ParamStore, Stack, Tape, Tensor, Var};

pub const BACKBONE_PREFIX: &str = "backbone";
pub const HEAD_PREFIX: &str = "head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub input_size: usize,
    /// Filters of each conv/relu/maxpool block.
    pub widths: Vec<usize>,
    pub head_units: usize,
    pub dropout: f64,
    /// Penalty on the squared head weights, added to the loss.
    pub l2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub frozen_backbone: bool,
    pub augment: bool,
    pub augmentation: AugmentConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            widths: vec![8, 16, 32, 64],
            head_units: 512,
            dropout: 0.4,
            l2: 0.005,
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 40,
            frozen_backbone: false,
            augment: true,
            augmentation: AugmentConfig::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("backbone widths {:?} must be non-empty and positive", self.widths));
        }
        let factor = 1usize << self.widths.len();
        if self.input_size == 0 || self.input_size % factor != 0 {
            return bad(format!(
                "input size {} must be a positive multiple of {factor} for {} pooling stages",
                self.input_size,
                self.widths.len()
            ));
        }
        if self.head_units == 0 {
            return bad("head_units must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.l2 >= 0.0) {
            return bad(format!("l2 {} must be >= 0", self.l2));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        self.augmentation.validate()
    }

    pub fn backbone_specs(&self) -> Vec<LayerSpec> {
        let mut specs: Vec<LayerSpec> = self
            .widths
            .iter()
            .flat_map(|&w| [LayerSpec::conv3(w), LayerSpec::Relu, LayerSpec::Maxpool2])
            .collect();
        specs.push(LayerSpec::GlobalAvgPool);
        specs
    }

    pub fn head_specs(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense {
                units: self.head_units,
            },
            LayerSpec::Relu,
            LayerSpec::Dropout {
                ratio: self.dropout,
            },
            LayerSpec::Dense { units: 2 },
            LayerSpec::Softmax,
        ]
    }
}

/// Settings of the self-supervised pretext stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretextConfig {
    pub images: usize,
    pub val_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub head_units: usize,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            images: 600,
            val_fraction: 0.2,
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 16,
            head_units: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub config: ClassifierConfig,
    pub store: ParamStore<f32>,
    backbone: Stack,
    head: Stack,
}

impl ClassifierModel {
    fn assemble(config: &ClassifierConfig, head_specs: &[LayerSpec], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, &[tag::INIT]);
        let mut store = ParamStore::new();
        let input = [config.input_size, config.input_size, 1];
        let backbone = Stack::build(BACKBONE_PREFIX, &config.backbone_specs(), &input, &mut store, &mut rng)?;
        let head = Stack::build(HEAD_PREFIX, head_specs, backbone.output_shape(), &mut store, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn classes(&self) -> usize {
        self.head.output_shape().iter().product()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.input_size, self.config.input_size, 1]
    }

    /// Class probabilities for one image already at the input size.
    pub fn forward<'s, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'s, f32>,
        store: &'s ParamStore<f32>,
        image: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let features = self.backbone.forward(tape, store, image, mode, rng)?;
        self.head.forward(tape, store, features, mode, rng)
    }

    pub fn head_weight_ids(&self) -> Vec<crate::tensor::ParamId> {
        self.head.weight_ids()
    }

    pub fn backbone_param_ids(&self) -> Vec<crate::tensor::ParamId> {
        self.backbone.param_ids()
    }

    /// Eval-mode probabilities; the image is resized if needed.
    pub fn probabilities(&self, image: &Tensor<f32>) -> Result<Vec<f64>> {
        let image = self.fit_input(image)?;
        let mut tape = Tape::new();
        let x = tape.input(image);
        let mut rng = seed::rng(0, &[tag::EVAL]);
        let p = self.forward(&mut tape, &self.store, x, Mode::Eval, &mut rng)?;
        Ok(tape.value(p).data().iter().map(|&v| v as f64).collect())
    }

    fn fit_input(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = self.config.input_size;
        if image.shape().len() != 3 || image.shape()[2] != 1 {
            return Err(Error::Dimension(format!(
                "classifier expects an HxWx1 image, got {:?}",
                image.shape()
            )));
        }
        if image.height() == n && image.width() == n {
            Ok(image.clone())
        } else {
            image.resize_bilinear(n, n)
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<f32> {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        Checkpoint::new(self.store.clone())
            .with_meta("kind", "classifier")
            .with_meta("classes", self.classes())
            .with_meta("config", config)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<f32>) -> Result<Self> {
        if ckpt.meta("kind") != Some("classifier") {
            return Err(Error::Load(format!(
                "expected a classifier checkpoint, found kind {:?}",
                ckpt.meta("kind")
            )));
        }
        let config: ClassifierConfig = ckpt
            .meta("config")
            .ok_or_else(|| Error::Load("classifier checkpoint lacks a config".into()))
            .and_then(|c| serde_json::from_str(c).map_err(|e| Error::Load(format!("config: {e}"))))?;
        let mut model = build_classifier(&config, 0)?;
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

/// Backbone plus the two-way head, initialized from `seed`.
pub fn build_classifier(config: &ClassifierConfig, seed: u64) -> Result<ClassifierModel> {
    ClassifierModel::assemble(config, &config.head_specs(), seed)
}

fn build_pretext(config: &ClassifierConfig, pretext: &PretextConfig, seed: u64) -> Result<ClassifierModel> {
    let head = [
        LayerSpec::Dense {
            units: pretext.head_units,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            units: PRETEXT_BUCKETS.len(),
        },
        LayerSpec::Softmax,
    ];
    ClassifierModel::assemble(config, &head, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    pub p_yes: f64,
    pub p_no: f64,
}

impl ClassifierOutput {
    pub fn label(&self) -> ClassLabel {
        if self.p_yes >= self.p_no {
            ClassLabel::Yes
        } else {
            ClassLabel::No
        }
    }
}

pub fn classify_image(model: &ClassifierModel, image: &Tensor<f32>) -> Result<ClassifierOutput> {
    if model.classes() != 2 {
        return Err(Error::State(format!("model has {} outputs, expected 2", model.classes())));
    }
    let p = model.probabilities(image)?;
    Ok(ClassifierOutput {
        p_yes: p[ClassLabel::Yes.index()],
        p_no: p[ClassLabel::No.index()],
    })
}

/// Parallel inference; results follow input order.
pub fn classify_all(model: &ClassifierModel, images: &[&Tensor<f32>]) -> Result<Vec<ClassifierOutput>> {
    images.par_iter().map(|img| classify_image(model, img)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunLog {
    pub model: String,
    pub param_count: usize,
    pub seed: u64,
    /// Validation accuracy before the first update.
    pub initial_val_accuracy: f64,
    pub records: Vec<EpochRecord>,
    pub config: ClassifierConfig,
}

impl TrainRunLog {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.val_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# model={}\n# param_count={}\n# seed={}\n# initial_val_accuracy={}\nepoch,train_loss,val_accuracy\n",
            self.model, self.param_count, self.seed, self.initial_val_accuracy
        );
        for r in &self.records {
            let _ = writeln!(out, "{},{:.6},{:.6}", r.epoch, r.train_loss, r.val_accuracy);
        }
        out
    }

    /// Reads a log written by [`TrainRunLog::to_csv`]. The config snapshot
    /// is not part of the CSV and comes back as the default.
    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut log = TrainRunLog {
            model: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            param_count: 0,
            seed: 0,
            initial_val_accuracy: 0.0,
            records: Vec::new(),
            config: ClassifierConfig::default(),
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("epoch,") {
                continue;
            }
            if let Some(kv) = line.strip_prefix('#') {
                let Some((k, v)) = kv.trim().split_once('=') else {
                    continue;
                };
                let bad = |_| err(i + 1, format!("bad value for {k}"));
                match k {
                    "model" => log.model = v.to_string(),
                    "param_count" => log.param_count = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                    "seed" => log.seed = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                    "initial_val_accuracy" => {
                        log.initial_val_accuracy = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
                    }
                    _ => {}
                }
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(err(i + 1, format!("expected 3 fields, found {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| err(i + 1, format!("bad number {s:?}")));
            let epoch = f[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| err(i + 1, format!("bad epoch {:?}", f[0])))?;
            let record = EpochRecord {
                epoch,
                train_loss: num(f[1])?,
                val_accuracy: num(f[2])?,
            };
            if !(0.0..=1.0).contains(&record.val_accuracy) {
                return Err(Error::Validation(format!("{}:{}: accuracy outside [0, 1]", path.display(), i + 1)));
            }
            if log.records.last().is_some_and(|r| r.epoch >= epoch) {
                return Err(Error::Validation(format!("{}:{}: epochs must increase", path.display(), i + 1)));
            }
            log.records.push(record);
        }
        Ok(log)
    }
}

struct LoopSettings {
    stage: &'static str,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    l2: f64,
    augmentation: Option<AugmentConfig>,
    frozen_backbone: bool,
}

/// Fraction of `items` whose argmax matches the target.
fn accuracy(model: &ClassifierModel, items: &[(&Tensor<f32>, usize)]) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = items
        .par_iter()
        .map(|(img, target)| {
            let p = model.probabilities(img)?;
            let best = p
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > p[best] { i } else { best });
            Ok(best == *target)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / items.len() as f64)
}

/// Shared minibatch loop; returns the per-epoch log and the epoch (0 for
/// the initial state) and store with the best validation accuracy.
fn run_training(
    model: &mut ClassifierModel,
    train: &[(&Tensor<f32>, usize)],
    val: &[(&Tensor<f32>, usize)],
    settings: &LoopSettings,
    seed: u64,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<(f64, Vec<EpochRecord>, usize, ParamStore<f32>)> {
    if train.is_empty() && settings.epochs > 0 {
        return Err(Error::Input("training set is empty".into()));
    }
    let initial = accuracy(model, val)?;
    let mut best = (initial, 0usize, model.store.clone());
    let mut optimizer = OptimizerState::adam(settings.learning_rate);
    optimizer.validate()?;
    let head_weights = model.head_weight_ids();
    let frozen = if settings.frozen_backbone {
        model.backbone_param_ids()
    } else {
        Vec::new()
    };
    let arch = ClassifierModel {
        config: model.config.clone(),
        store: ParamStore::new(),
        backbone: model.backbone.clone(),
        head: model.head.clone(),
    };
    let mut records = Vec::with_capacity(settings.epochs);
    for epoch in 1..=settings.epochs {
        let train_err = |reason: String| Error::Training {
            stage: settings.stage,
            index: epoch,
            reason,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(seed, &[tag::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(settings.batch_size) {
            let loss = accumulate_batch(&mut model.store, chunk, |tape, store, &i| {
                let mut rng = seed::rng(seed, &[tag::SAMPLE, epoch as u64, i as u64]);
                let (img, target) = train[i];
                let img = match &settings.augmentation {
                    Some(cfg) => augment_image(img, cfg, &mut rng)?,
                    None => img.clone(),
                };
                let x = tape.input(img);
                let probs = arch.forward(tape, store, x, Mode::Train, &mut rng)?;
                if settings.l2 > 0.0 {
                    let ws: Vec<Var> = head_weights.iter().map(|&id| tape.param(store, id)).collect();
                    tape.cross_entropy_with_l2(probs, target, &ws, settings.l2)
                } else {
                    tape.cross_entropy(probs, target)
                }
            });
            let loss = loss.map_err(|e| train_err(e.to_string()))?;
            for &id in &frozen {
                model.store.get_mut(id).grad = None;
            }
            optimizer.step(&mut model.store)?;
            model.store.ensure_finite().map_err(|e| train_err(e.to_string()))?;
            loss_sum += loss as f64;
            batches += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_accuracy: accuracy(model, val)?,
        };
        observer(&record);
        if record.val_accuracy > best.0 {
            best = (record.val_accuracy, epoch, model.store.clone());
        }
        records.push(record);
    }
    Ok((initial, records, best.1, best.2))
}

#[derive(Debug, Clone)]
pub struct PretextOutcome {
    /// Backbone parameters only.
    pub checkpoint: Checkpoint<f32>,
    pub records: Vec<EpochRecord>,
    pub val_accuracy: f64,
}

/// Trains the backbone on lesion-count buckets and returns its weights.
pub fn pretrain_pretext(
    config: &ClassifierConfig,
    pretext: &PretextConfig,
    phantom: &PhantomConfig,
    seed: u64,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<PretextOutcome> {
    if pretext.images < 2 || !(0.0..1.0).contains(&pretext.val_fraction) {
        return Err(Error::Config("pretext needs >= 2 images and val_fraction in [0, 1)".into()));
    }
    let phantom = PhantomConfig {
        image_size: config.input_size,
        seed: seed::derive(seed, &[phantom.seed]),
        ..phantom.clone()
    };
    let data: Vec<(Tensor<f32>, usize)> = (0..pretext.images)
        .into_par_iter()
        .map(|i| generate_pretext_image(&phantom, i))
        .collect::<Result<_>>()?;
    let n_val = ((pretext.images as f64) * pretext.val_fraction).round() as usize;
    let n_train = pretext.images - n_val;
    let view: Vec<(&Tensor<f32>, usize)> = data.iter().map(|(t, c)| (t, *c)).collect();
    let mut model = build_pretext(config, pretext, seed)?;
    let settings = LoopSettings {
        stage: "pretext",
        epochs: pretext.epochs,
        batch_size: pretext.batch_size.max(1),
        learning_rate: pretext.learning_rate,
        l2: 0.0,
        augmentation: None,
        frozen_backbone: false,
    };
    let (initial, records, _, _) = run_training(&mut model, &view[..n_train], &view[n_train..], &settings, seed, observer)?;
    let val_accuracy = records.last().map_or(initial, |r| r.val_accuracy);
    let config_json = serde_json::to_string(config).expect("config serializes");
    let checkpoint = Checkpoint::new(model.store.subset(&format!("{BACKBONE_PREFIX}.")))
        .with_meta("kind", "backbone")
        .with_meta("config", config_json)
        .with_meta("pretext_val_accuracy", val_accuracy);
    Ok(PretextOutcome {
        checkpoint,
        records,
        val_accuracy,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub log: TrainRunLog,
    /// Weights with the highest validation accuracy (earliest on ties).
    pub best: Checkpoint<f32>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
}

/// Loads the pretrained backbone (if any) into `model` and trains all
/// layers, or only the head when the backbone is frozen.
pub fn finetune(
    model: &mut ClassifierModel,
    pretrained: Option<&Checkpoint<f32>>,
    train: &[Sample],
    val: &[Sample],
    seed: u64,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<FinetuneOutcome> {
    if model.classes() != 2 {
        return Err(Error::State("fine-tuning needs the two-way head".into()));
    }
    if let Some(ckpt) = pretrained {
        model.store.copy_matching(&ckpt.params, &format!("{BACKBONE_PREFIX}."))?;
    }
    let n = model.config.input_size;
    let prepare = |samples: &[Sample]| -> Result<Vec<(Tensor<f32>, usize)>> {
        samples
            .par_iter()
            .map(|s| {
                let img = if s.image.height() == n && s.image.width() == n {
                    s.image.clone()
                } else {
                    s.image.resize_bilinear(n, n)?
                };
                Ok((img, s.label.index()))
            })
            .collect()
    };
    let (train_data, val_data) = (prepare(train)?, prepare(val)?);
    let train_view: Vec<(&Tensor<f32>, usize)> = train_data.iter().map(|(t, c)| (t, *c)).collect();
    let val_view: Vec<(&Tensor<f32>, usize)> = val_data.iter().map(|(t, c)| (t, *c)).collect();
    let cfg = model.config.clone();
    let settings = LoopSettings {
        stage: "finetune",
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        l2: cfg.l2,
        augmentation: cfg.augment.then(|| cfg.augmentation.clone()),
        frozen_backbone: cfg.frozen_backbone,
    };
    let (initial, records, best_epoch, best_store) =
        run_training(model, &train_view, &val_view, &settings, seed, observer)?;
    let best_accuracy = if best_epoch == 0 {
        initial
    } else {
        records[best_epoch - 1].val_accuracy
    };
    let mut best_model = model.clone();
    best_model.store = best_store;
    let best = best_model
        .to_checkpoint()
        .with_meta("epoch", best_epoch)
        .with_meta("val_accuracy", best_accuracy)
        .with_meta("seed", seed);
    let log = TrainRunLog {
        model: "classifier".into(),
        param_count: model.param_count(),
        seed,
        initial_val_accuracy: initial,
        records,
        config: cfg,
    };
    Ok(FinetuneOutcome {
        log,
        best,
        best_epoch,
        best_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub model: String,
    pub param_count: usize,
    pub score: f64,
}

/// Orders runs by mean validation accuracy over their final `window`
/// epochs; ties go to fewer parameters, then to the name.
pub fn rank_models(logs: &[TrainRunLog], window: usize) -> Result<Vec<RankRow>> {
    if window == 0 {
        return Err(Error::Input("ranking window must be positive".into()));
    }
    let mut rows = logs
        .iter()
        .map(|log| {
            if log.records.len() < window {
                return Err(Error::Input(format!(
                    "log {:?} has {} epochs, fewer than the window of {window}",
                    log.model,
                    log.records.len()
                )));
            }
            let tail = &log.records[log.records.len() - window..];
            let score = tail.iter().map(|r| r.val_accuracy).sum::<f64>() / window as f64;
            Ok(RankRow {
                rank: 0,
                model: log.model.clone(),
                param_count: log.param_count,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.param_count.cmp(&b.param_count))
            .then_with(|| a.model.cmp(&b.model))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(rows)
}

pub fn ranking_csv(rows: &[RankRow]) -> String {
    let mut out = String::from("rank,model,param_count,score\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.6}", r.rank, r.model, r.param_count, r.score);
    }
    out
}

pub fn ranking_table(rows: &[RankRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:>4}  {:<width$}  {:>12}  {:>8}\n", "rank", "model", "params", "score");
    for r in rows {
        let _ = writeln!(
            out,
            "{:>4}  {:<width$}  {:>12}  {:>8.4}",
            r.rank, r.model, r.param_count, r.score
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamId;

    fn tiny() -> ClassifierConfig {
        ClassifierConfig {
            input_size: 16,
            widths: vec![4, 8],
            head_units: 8,
            ..ClassifierConfig::default()
        }
    }

    fn noop(_: &EpochRecord) {}

    #[test]
    fn output_shapes_for_both_input_sizes() {
        for size in [64, 224] {
            let cfg = ClassifierConfig {
                input_size: size,
                ..ClassifierConfig::default()
            };
            let model = build_classifier(&cfg, 1).unwrap();
            let img = Tensor::full(&[size, size, 1], 0.5f32);
            let p = model.probabilities(&img).unwrap();
            assert_eq!(p.len(), 2);
            assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn odd_input_size_is_rejected() {
        let cfg = ClassifierConfig {
            input_size: 72,
            ..ClassifierConfig::default()
        };
        assert!(matches!(build_classifier(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_init() {
        let a = build_classifier(&tiny(), 5).unwrap();
        let b = build_classifier(&tiny(), 5).unwrap();
        let c = build_classifier(&tiny(), 6).unwrap();
        let ids: Vec<ParamId> = a.store.ids().collect();
        assert!(ids.iter().all(|&id| a.store.get(id) == b.store.get(id)));
        assert!(ids.iter().any(|&id| a.store.get(id) != c.store.get(id)));
    }

    #[test]
    fn zeroed_head_gives_even_odds() {
        let mut model = build_classifier(&tiny(), 2).unwrap();
        for id in model.head.param_ids() {
            model.store.get_mut(id).data_mut().fill(0.0);
        }
        let out = classify_image(&model, &Tensor::full(&[16, 16, 1], 0.3)).unwrap();
        assert_eq!((out.p_yes, out.p_no), (0.5, 0.5));
    }

    #[test]
    fn scaling_last_dense_keeps_decision() {
        let mut model = build_classifier(&tiny(), 3).unwrap();
        let img = Tensor::image(16, 16, (0..256).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let before = classify_image(&model, &img).unwrap().label();
        let last: Vec<ParamId> = model.head.param_ids()[2..].to_vec();
        for id in last {
            model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 3.5);
        }
        assert_eq!(classify_image(&model, &img).unwrap().label(), before);
    }

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { ClassLabel::Yes } else { ClassLabel::No };
                let data = (0..256)
                    .map(|p| {
                        let base = if label == ClassLabel::Yes { 0.7 } else { 0.2 };
                        base + ((p * 13 + i * 7) % 10) as f32 * 0.01
                    })
                    .collect();
                Sample {
                    name: format!("s{i}"),
                    image: Tensor::image(16, 16, data).unwrap(),
                    label,
                    boxes: Vec::new(),
                }
            })
            .collect()
    }

    #[test]
    fn frozen_zero_epochs_keeps_baseline() {
        let cfg = ClassifierConfig {
            frozen_backbone: true,
            epochs: 0,
            ..tiny()
        };
        let mut model = build_classifier(&cfg, 4).unwrap();
        let data = samples(8);
        let out = finetune(&mut model, None, &data, &data, 1, &mut noop).unwrap();
        assert!(out.log.records.is_empty());
        assert_eq!(out.best_epoch, 0);
        assert_eq!(out.best_accuracy, out.log.initial_val_accuracy);
    }

    #[test]
    fn memorizes_sixteen_images() {
        let cfg = ClassifierConfig {
            epochs: 5,
            l2: 0.0,
            augment: false,
            dropout: 0.0,
            learning_rate: 1e-2,
            batch_size: 1,
            widths: vec![8, 16],
            head_units: 32,
            ..tiny()
        };
        let mut model = build_classifier(&cfg, 8).unwrap();
        let data = samples(16);
        let out = finetune(&mut model, None, &data, &data, 2, &mut noop).unwrap();
        let losses: Vec<f64> = out.log.records.iter().map(|r| r.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{losses:?}");
        assert!(*losses.last().unwrap() < 0.05, "{losses:?}");
    }

    #[test]
    fn frozen_backbone_does_not_move() {
        let cfg = ClassifierConfig {
            frozen_backbone: true,
            epochs: 1,
            ..tiny()
        };
        let mut model = build_classifier(&cfg, 4).unwrap();
        let before = model.store.clone();
        let data = samples(8);
        finetune(&mut model, None, &data, &data, 1, &mut noop).unwrap();
        for id in model.backbone_param_ids() {
            assert_eq!(model.store.get(id).data(), before.get(id).data());
        }
        assert!(model.head.param_ids().iter().any(|&id| model.store.get(id).data() != before.get(id).data()));
    }

    #[test]
    fn identical_runs_identical_logs() {
        let cfg = ClassifierConfig { epochs: 2, ..tiny() };
        let data = samples(12);
        let run = || {
            let mut m = build_classifier(&cfg, 9).unwrap();
            finetune(&mut m, None, &data, &data, 3, &mut noop).unwrap().log
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pretext_zero_epochs_is_init_and_incompatible_load_fails() {
        let cfg = tiny();
        let phantom = PhantomConfig::default();
        let pre = PretextConfig {
            images: 6,
            epochs: 0,
            ..PretextConfig::default()
        };
        let out = pretrain_pretext(&cfg, &pre, &phantom, 11, &mut noop).unwrap();
        let init = build_classifier(&cfg, 11).unwrap();
        for id in out.checkpoint.params.ids() {
            let name = out.checkpoint.params.name(id);
            let mine = init.store.get(init.store.find(name).unwrap());
            assert_eq!(out.checkpoint.params.get(id), mine);
        }

        let other = ClassifierConfig {
            widths: vec![4, 4],
            ..tiny()
        };
        let mut model = build_classifier(&other, 1).unwrap();
        let data = samples(4);
        let r = finetune(&mut model, Some(&out.checkpoint), &data, &data, 1, &mut noop);
        assert!(matches!(r, Err(Error::Load(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = build_classifier(&tiny(), 13).unwrap();
        let text = model.to_checkpoint().to_text();
        let back = ClassifierModel::from_checkpoint(&Checkpoint::from_text(&text).unwrap()).unwrap();
        let img = Tensor::full(&[16, 16, 1], 0.25f32);
        assert_eq!(model.probabilities(&img).unwrap(), back.probabilities(&img).unwrap());
    }

    fn constant_log(name: &str, params: usize, values: &[f64]) -> TrainRunLog {
        TrainRunLog {
            model: name.into(),
            param_count: params,
            seed: 0,
            initial_val_accuracy: 0.0,
            records: values
                .iter()
                .enumerate()
                .map(|(i, &v)| EpochRecord {
                    epoch: i + 1,
                    train_loss: 0.0,
                    val_accuracy: v,
                })
                .collect(),
            config: ClassifierConfig::default(),
        }
    }

    #[test]
    fn ranking_examples() {
        let a = constant_log("MobileNet", 3_000_000, &[0.9163; 20]);
        let b = constant_log("InceptionResNet", 54_000_000, &[0.8436; 20]);
        let rows = rank_models(&[b.clone(), a.clone()], 20).unwrap();
        assert_eq!(rows[0].model, "MobileNet");

        let big = constant_log("big", 10, &[0.8; 20]);
        let small = constant_log("small", 5, &[0.8; 20]);
        assert_eq!(rank_models(&[big, small], 20).unwrap()[0].model, "small");

        let osc: Vec<f64> = (0..30).map(|i| if i % 2 == 0 { 0.8 } else { 0.9 }).collect();
        let s = rank_models(&[constant_log("osc", 1, &osc)], 20).unwrap()[0].score;
        assert!((s - 0.85).abs() < 1e-12);

        let short = constant_log("short", 1, &[0.5; 5]);
        let e = rank_models(&[short], 20).unwrap_err();
        assert!(e.to_string().contains("short"));
    }

    #[test]
    fn log_csv_round_trip() {
        let log = constant_log("m", 42, &[0.5, 0.75]);
        let back = TrainRunLog::from_csv(&log.to_csv(), Path::new("m.csv")).unwrap();
        assert_eq!((back.model.as_str(), back.param_count), ("m", 42));
        assert_eq!(back.records, log.records);
    }
}
