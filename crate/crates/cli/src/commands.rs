//! Subcommand implementations. Each command writes into its own directory
//! under the output root, next to a snapshot of the effective config.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use pepipe::classifier::{
    build_classifier, classify_all, finetune, pretrain_pretext, rank_models, ranking_csv, ranking_table, ClassifierModel,
    EpochRecord, TrainRunLog,
};
use pepipe::dataset::{load_png_gray, load_samples, split_dataset, Manifest, Sample};
use pepipe::detector::{
    build_detector, detect_image, detections_to_text, evaluate_samples, log_to_csv, train_detector as fit_detector, DetectorModel,
};
use pepipe::fusion::{fuse, verdict_record};
use pepipe::metrics::{threshold_sweep, IterationRecord};
use pepipe::phantom::{generate_dataset, PhantomConfig};
use pepipe::render::{render_overlay, LinePlot, Series, BLUE, GREEN, RED};
use pepipe::selftest::{ap_oracle_suite, gradient_suite, SuiteEntry};
use pepipe::seed::{self, tag};
use pepipe::tensor::checkpoint::Checkpoint;
use pepipe::{Error, Result};

use crate::{Context, EvalArgs, PhantomGenArgs, PhantomSet, PredictArgs, RankArgs, SelftestArgs, TrainClassifierArgs, TrainDetectorArgs};

const SHIPPED_CLASSIFIER: &str = include_str!("../assets/desk/classifier.ckpt");
const SHIPPED_DETECTOR: &str = include_str!("../assets/desk/detector.ckpt");

#[derive(Clone, Copy)]
enum DataSet {
    Classification,
    Detection,
}

impl DataSet {
    fn name(self) -> &'static str {
        match self {
            DataSet::Classification => "classification",
            DataSet::Detection => "detection",
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `<out>/<name>` with the config snapshot written into it.
fn stage_dir(ctx: &Context, name: &str) -> Result<PathBuf> {
    let dir = ctx.out.join(name);
    create_dir(&dir)?;
    write(&dir.join("config.toml"), &ctx.config.to_toml())?;
    Ok(dir)
}

fn phantom_config(ctx: &Context, set: DataSet) -> PhantomConfig {
    match set {
        DataSet::Classification => ctx.config.classification_phantom(),
        DataSet::Detection => ctx.config.detection_phantom(),
    }
}

fn generate(ctx: &Context, set: DataSet) -> Result<(PathBuf, Manifest)> {
    let root = ctx.out.join("phantom").join(set.name());
    let cfg = phantom_config(ctx, set);
    eprintln!("generating {} {} phantoms in {}", cfg.total(), set.name(), root.display());
    let manifest = generate_dataset(&cfg, &root)?;
    Ok((root, manifest))
}

/// Explicit root, else the configured root, else the generated phantom set
/// (created on first use).
fn dataset(ctx: &Context, set: DataSet, explicit: Option<&Path>) -> Result<(PathBuf, Manifest)> {
    let configured = match set {
        DataSet::Classification => ctx.config.data.classification_dir.as_deref(),
        DataSet::Detection => ctx.config.data.detection_dir.as_deref(),
    };
    if let Some(root) = explicit.or(configured) {
        let manifest = Manifest::read(&root.join("manifest.txt"))?;
        return Ok((root.to_path_buf(), manifest));
    }
    let root = ctx.out.join("phantom").join(set.name());
    let path = root.join("manifest.txt");
    if path.is_file() {
        return Ok((root, Manifest::read(&path)?));
    }
    stage_dir(ctx, "phantom")?;
    generate(ctx, set)
}

fn split(ctx: &Context, manifest: &Manifest, train_fraction: f64, dir: &Path) -> Result<(Manifest, Manifest)> {
    let split_seed = seed::derive(ctx.config.seed, &[tag::SPLIT]);
    let (train, val) = split_dataset(manifest, train_fraction, 1.0 - train_fraction, split_seed)?;
    train.write(&dir.join("train.txt"))?;
    val.write(&dir.join("val.txt"))?;
    Ok((train, val))
}

fn epochs_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_accuracy\n");
    for r in records {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.epoch, r.train_loss, r.val_accuracy));
    }
    out
}

fn print_epoch(stage: &str) -> impl FnMut(&EpochRecord) + '_ {
    move |r| {
        eprintln!(
            "{stage} epoch {:>3}  loss {:.4}  val accuracy {:.4}",
            r.epoch, r.train_loss, r.val_accuracy
        )
    }
}

pub fn phantom_gen(ctx: &Context, args: &PhantomGenArgs) -> Result<()> {
    stage_dir(ctx, "phantom")?;
    let sets: &[DataSet] = match args.set {
        PhantomSet::Classification => &[DataSet::Classification],
        PhantomSet::Detection => &[DataSet::Detection],
        PhantomSet::Both => &[DataSet::Classification, DataSet::Detection],
    };
    for &set in sets {
        let (root, _) = generate(ctx, set)?;
        let text = fs::read_to_string(root.join("stats.txt")).map_err(|e| Error::io(root.join("stats.txt"), e))?;
        println!("{}:\n{text}", set.name());
    }
    Ok(())
}

pub fn pretrain(ctx: &Context) -> Result<()> {
    let dir = stage_dir(ctx, "pretrain")?;
    let checkpoint = run_pretext(ctx, &dir)?;
    let acc = checkpoint.meta("pretext_val_accuracy").unwrap_or("?");
    write(&dir.join("summary.txt"), &format!("pretext_val_accuracy={acc}\n"))?;
    println!("pretext validation accuracy {acc}; backbone in {}", dir.join("backbone.ckpt").display());
    Ok(())
}

fn run_pretext(ctx: &Context, dir: &Path) -> Result<Checkpoint<f32>> {
    let cfg = &ctx.config;
    let outcome = pretrain_pretext(
        &cfg.classifier,
        &cfg.pretext,
        &cfg.classification_phantom(),
        cfg.seed,
        &mut print_epoch("pretext"),
    )?;
    outcome.checkpoint.save(&dir.join("backbone.ckpt"))?;
    write(&dir.join("pretext_log.csv"), &epochs_csv(&outcome.records))?;
    Ok(outcome.checkpoint)
}

pub fn train_classifier(mut ctx: Context, args: &TrainClassifierArgs) -> Result<()> {
    if let Some(epochs) = args.epochs {
        ctx.config.classifier.epochs = epochs;
        ctx.config.validate()?;
    }
    let (root, manifest) = dataset(&ctx, DataSet::Classification, args.data.as_deref())?;
    let dir = stage_dir(&ctx, "classifier")?;
    let (train_m, val_m) = split(&ctx, &manifest, ctx.config.data.classification_train_fraction, &dir)?;
    let train = load_samples(&root, &train_m, false)?;
    let val = load_samples(&root, &val_m, false)?;
    let (pretrained, init) = match (&args.pretrained, args.scratch) {
        (Some(path), _) => (Some(Checkpoint::load(path)?), "pretrained"),
        (None, true) => (None, "scratch"),
        (None, false) => (Some(run_pretext(&ctx, &dir)?), "pretrained"),
    };
    let mut model = build_classifier(&ctx.config.classifier, ctx.config.seed)?;
    let mut outcome = finetune(
        &mut model,
        pretrained.as_ref(),
        &train,
        &val,
        ctx.config.seed,
        &mut print_epoch("finetune"),
    )?;
    outcome.log.model = format!("classifier-{init}");
    write(&dir.join("log.csv"), &outcome.log.to_csv())?;
    outcome.best.save(&dir.join("best.ckpt"))?;
    model.to_checkpoint().with_meta("seed", ctx.config.seed).save(&dir.join("final.ckpt"))?;
    accuracy_plot(&outcome.log).save(&dir.join("accuracy.png"))?;
    let final_acc = outcome.log.final_accuracy().unwrap_or(outcome.log.initial_val_accuracy);
    let summary = format!(
        "init={init}\nparam_count={}\ntrain_images={}\nval_images={}\nbest_epoch={}\nbest_val_accuracy={:.6}\nfinal_val_accuracy={final_acc:.6}\n",
        outcome.log.param_count,
        train.len(),
        val.len(),
        outcome.best_epoch,
        outcome.best_accuracy
    );
    write(&dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn accuracy_plot(log: &TrainRunLog) -> LinePlot {
    let mut points = vec![(0.0, log.initial_val_accuracy)];
    points.extend(log.records.iter().map(|r| (r.epoch as f64, r.val_accuracy)));
    LinePlot {
        title: "VALIDATION ACCURACY".into(),
        x_label: "EPOCH".into(),
        series: vec![Series {
            name: log.model.to_uppercase(),
            points,
            color: BLUE,
        }],
        y_range: Some((0.0, 1.0)),
    }
}

pub fn train_detector(mut ctx: Context, args: &TrainDetectorArgs) -> Result<()> {
    if let Some(iterations) = args.iterations {
        ctx.config.detector.iterations = iterations;
        ctx.config.validate()?;
    }
    let (root, manifest) = dataset(&ctx, DataSet::Detection, args.data.as_deref())?;
    let dir = stage_dir(&ctx, "detector")?;
    let (train_m, val_m) = split(&ctx, &manifest, ctx.config.data.detection_train_fraction, &dir)?;
    let train = load_samples(&root, &train_m, true)?;
    let val = load_samples(&root, &val_m, true)?;
    let mut model = build_detector(&ctx.config.detector, &train, ctx.config.seed)?;
    let anchors: String = model.anchors.anchors.iter().map(|(w, h)| format!("{w:.4} {h:.4}\n")).collect();
    write(&dir.join("anchors.txt"), &anchors)?;
    let mut observer = |r: &IterationRecord| match r.val_ap50 {
        Some(ap) => eprintln!("iteration {:>6}  loss {:.4}  val AP@0.5 {ap:.4}", r.iteration, r.loss),
        None => eprintln!("iteration {:>6}  loss {:.4}", r.iteration, r.loss),
    };
    let outcome = fit_detector(&mut model, &train, &val, ctx.config.seed, &mut observer)?;
    write(&dir.join("log.csv"), &log_to_csv(&outcome.log))?;
    outcome.best.save(&dir.join("best.ckpt"))?;
    model.to_checkpoint().with_meta("seed", ctx.config.seed).save(&dir.join("final.ckpt"))?;
    training_plot(&outcome.log).save(&dir.join("training.png"))?;
    let best_ap = outcome.best_ap50.map_or("none".to_string(), |a| format!("{a:.6}"));
    let summary = format!(
        "param_count={}\ntrain_images={}\nval_images={}\nbest_iteration={}\nbest_val_ap50={best_ap}\n",
        model.param_count(),
        train.len(),
        val.len(),
        outcome.best_iteration
    );
    write(&dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Validation AP and the training loss scaled by its maximum.
fn training_plot(log: &[IterationRecord]) -> LinePlot {
    let max_loss = log.iter().map(|r| r.loss).fold(f64::MIN_POSITIVE, f64::max);
    LinePlot {
        title: "DETECTOR TRAINING".into(),
        x_label: "ITERATION".into(),
        series: vec![
            Series {
                name: "VAL AP@0.5".into(),
                points: log
                    .iter()
                    .filter_map(|r| r.val_ap50.map(|a| (r.iteration as f64, a)))
                    .collect(),
                color: BLUE,
            },
            Series {
                name: format!("LOSS / {max_loss:.2}"),
                points: log.iter().map(|r| (r.iteration as f64, r.loss / max_loss)).collect(),
                color: RED,
            },
        ],
        y_range: Some((0.0, 1.0)),
    }
}

/// Checkpoint, dataset root and manifest for an evaluation command.
fn eval_inputs(ctx: &Context, args: &EvalArgs, set: DataSet, run: &str) -> Result<(PathBuf, PathBuf, Manifest)> {
    let checkpoint = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| ctx.out.join(run).join("best.ckpt"));
    let (root, all) = dataset(ctx, set, args.data.as_deref())?;
    let default_val = ctx.out.join(run).join("val.txt");
    let manifest = match &args.manifest {
        Some(path) => Manifest::read(path)?,
        None if args.data.is_none() && default_val.is_file() => Manifest::read(&default_val)?,
        None => all,
    };
    Ok((checkpoint, root, manifest))
}

fn stem(sample: &Sample) -> String {
    Path::new(&sample.name)
        .file_stem()
        .map_or_else(|| sample.name.clone(), |s| s.to_string_lossy().into_owned())
}

pub fn eval_classifier(ctx: &Context, args: &EvalArgs) -> Result<()> {
    let (checkpoint, root, manifest) = eval_inputs(ctx, args, DataSet::Classification, "classifier")?;
    let model = ClassifierModel::load(&checkpoint)?;
    let samples = load_samples(&root, &manifest, false)?;
    if samples.is_empty() {
        return Err(Error::Input("no images to evaluate".into()));
    }
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let outputs = classify_all(&model, &images)?;
    let dir = stage_dir(ctx, "eval-classifier")?;
    let mut csv = String::from("image,label,p_yes,p_no,predicted\n");
    let mut correct = 0;
    for (s, o) in samples.iter().zip(&outputs) {
        correct += usize::from(o.label() == s.label);
        csv.push_str(&format!("{},{},{:.6},{:.6},{}\n", s.name, s.label, o.p_yes, o.p_no, o.label()));
    }
    write(&dir.join("predictions.csv"), &csv)?;
    let summary = format!(
        "checkpoint={}\nimages={}\ncorrect={correct}\naccuracy={:.6}\n",
        checkpoint.display(),
        samples.len(),
        correct as f64 / samples.len() as f64
    );
    write(&dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn eval_detector(ctx: &Context, args: &EvalArgs) -> Result<()> {
    let (checkpoint, root, manifest) = eval_inputs(ctx, args, DataSet::Detection, "detector")?;
    let model = DetectorModel::load(&checkpoint)?;
    let samples = load_samples(&root, &manifest, true)?;
    let results = evaluate_samples(&model, &samples)?;
    let report = threshold_sweep(&results, &ctx.config.eval.iou_thresholds, ctx.config.eval.conf_threshold)?;
    let dir = stage_dir(ctx, "eval-detector")?;
    write(&dir.join("metrics.csv"), &report.to_csv())?;
    write(&dir.join("pr_curves.csv"), &report.pr_curves_csv())?;
    let series = |name: &str, color, f: fn(&pepipe::metrics::ThresholdRecord) -> f64| Series {
        name: name.into(),
        points: report.records.iter().map(|r| (r.iou_threshold, f(r))).collect(),
        color,
    };
    LinePlot {
        title: "DETECTION METRICS".into(),
        x_label: "IOU THRESHOLD".into(),
        series: vec![
            series("AP", BLUE, |r| r.ap),
            series("F1", RED, |r| r.f1),
            series("AVG IOU", GREEN, |r| r.avg_iou),
        ],
        y_range: Some((0.0, 1.0)),
    }
    .save(&dir.join("metrics.png"))?;
    let det_dir = dir.join("detections");
    create_dir(&det_dir)?;
    let conf = model.config.conf_threshold;
    for (s, r) in samples.iter().zip(&results) {
        let kept: Vec<_> = r.detections.iter().filter(|d| d.confidence >= conf).cloned().collect();
        write(&det_dir.join(format!("{}.txt", stem(s))), &detections_to_text(&kept))?;
    }
    println!("checkpoint {} on {} images", checkpoint.display(), samples.len());
    print!("{}", report.to_csv());
    Ok(())
}

pub fn rank(ctx: &Context, args: &RankArgs) -> Result<()> {
    let mut logs = args
        .logs
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainRunLog::from_csv(&text, p)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut seen = HashSet::new();
    if !logs.iter().all(|l| seen.insert(l.model.clone())) {
        for (log, path) in logs.iter_mut().zip(&args.logs) {
            log.model = path.display().to_string();
        }
    }
    let rows = rank_models(&logs, args.window.unwrap_or(ctx.config.eval.rank_window))?;
    let dir = stage_dir(ctx, "rank")?;
    write(&dir.join("ranking.csv"), &ranking_csv(&rows))?;
    let table = ranking_table(&rows);
    write(&dir.join("ranking.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn shipped(text: &str, what: &str, flag: &str) -> Result<Checkpoint<f32>> {
    if text.trim().is_empty() {
        return Err(Error::State(format!("no shipped {what} checkpoint in this build; pass {flag}")));
    }
    Checkpoint::from_text(text)
}

fn collect_pngs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_pngs(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    Ok(())
}

pub fn predict(ctx: &Context, args: &PredictArgs) -> Result<()> {
    let classifier = match &args.classifier {
        Some(p) => ClassifierModel::load(p)?,
        None => ClassifierModel::from_checkpoint(&shipped(SHIPPED_CLASSIFIER, "classifier", "--classifier")?)?,
    };
    let detector = match &args.detector {
        Some(p) => DetectorModel::load(p)?,
        None => DetectorModel::from_checkpoint(&shipped(SHIPPED_DETECTOR, "detector", "--detector")?)?,
    };
    let mut inputs = Vec::new();
    if args.input.is_dir() {
        collect_pngs(&args.input, &mut inputs)?;
        inputs.sort();
    } else {
        inputs.push(args.input.clone());
    }
    if inputs.is_empty() {
        return Err(Error::Input(format!("no PNG images under {}", args.input.display())));
    }
    let dir = stage_dir(ctx, "predict")?;
    let overlays = dir.join("overlays");
    create_dir(&overlays)?;
    let mut jsonl = String::new();
    for path in &inputs {
        let image = load_png_gray(path)?;
        let cls = pepipe::classifier::classify_image(&classifier, &image)?;
        let detections = detect_image(&detector, &image)?;
        let verdict = fuse(&cls, &detections, &ctx.config.fusion)?;
        let name = path.strip_prefix(&args.input).ok().filter(|p| !p.as_os_str().is_empty()).unwrap_or(path);
        let name = name.to_string_lossy().replace('\\', "/");
        let record = verdict_record(&name, &verdict);
        println!("{record}");
        jsonl.push_str(&record);
        jsonl.push('\n');
        let stem = path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        render_overlay(&image, &verdict, &overlays.join(format!("{stem}.overlay.png")))?;
    }
    write(&dir.join("verdicts.jsonl"), &jsonl)?;
    Ok(())
}

pub fn selftest(ctx: &Context, args: &SelftestArgs) -> Result<()> {
    let mut entries: Vec<SuiteEntry> = gradient_suite(args.instances, ctx.config.seed)?;
    entries.push(ap_oracle_suite(args.ap_instances, ctx.config.seed)?);
    let mut report = String::from("check,instances,worst_error,result\n");
    for e in &entries {
        report.push_str(&format!(
            "{},{},{:.3e},{}\n",
            e.name,
            e.instances,
            e.worst,
            if e.passed { "PASS" } else { "FAIL" }
        ));
    }
    let dir = stage_dir(ctx, "selftest")?;
    write(&dir.join("report.txt"), &report)?;
    print!("{report}");
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("self-test failed: {}", failed.join(", "))))
    }
}
