//! End-to-end acceptance run: one PASS or FAIL line per criterion.
//!
//! Drives the `pepipe` binary on desk-profile phantoms. Expect roughly
//! half an hour on one core; the exit status is non-zero if any criterion
//! fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use pepipe::classifier::ClassifierOutput;
use pepipe::detector::{decode, encode_targets, AnchorSet, SlotKind};
use pepipe::fusion::{fuse, FusionConfig, Rule, Verdict};
use pepipe::geometry::{iou, Detection, Rect};
use pepipe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<(bool, String), String>;

const SEEDS: [u64; 3] = [7, 8, 9];
const CLASSIFIER_BUDGET: Duration = Duration::from_secs(600);
const DETECTOR_BUDGET: Duration = Duration::from_secs(1200);

struct Run {
    root: PathBuf,
}

impl Run {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Runs the binary and returns its stdout; progress on stderr is
    /// only shown on failure.
    fn pepipe(&self, args: &[&str]) -> Result<(String, Duration), String> {
        let start = Instant::now();
        let out = Command::new(env!("CARGO_BIN_EXE_pepipe"))
            .args(args)
            .output()
            .map_err(|e| format!("spawn pepipe: {e}"))?;
        if !out.status.success() {
            return Err(format!(
                "pepipe {} exited with {}: {}",
                args.join(" "),
                out.status,
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        Ok((String::from_utf8_lossy(&out.stdout).into_owned(), start.elapsed()))
    }
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn read(p: &Path) -> Result<String, String> {
    fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))
}

/// `key=value` lines of a summary file.
fn summary(p: &Path) -> Result<BTreeMap<String, String>, String> {
    Ok(read(p)?
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn number(map: &BTreeMap<String, String>, key: &str) -> Result<f64, String> {
    map.get(key)
        .ok_or_else(|| format!("missing {key}"))?
        .parse()
        .map_err(|e| format!("{key}: {e}"))
}

fn digest_tree(root: &Path) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| format!("{}: {e}", dir.display()))? {
            let p = entry.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).map_err(|e| e.to_string())?;
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, format!("{:x}", Sha256::digest(&bytes)));
            }
        }
    }
    Ok(out)
}

fn selftest(run: &Run) -> Result<(String, Duration), String> {
    run.pepipe(&["--out", path(&run.dir("selftest")), "selftest"])
}

fn gradient_oracle(run: &Run) -> Outcome {
    let (_, elapsed) = selftest(run)?;
    let report = read(&run.dir("selftest/selftest/report.txt"))?;
    let grads: Vec<&str> = report
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("average_precision"))
        .collect();
    let ok = !grads.is_empty()
        && grads.iter().all(|l| l.ends_with("PASS") && l.split(',').nth(1) == Some("50"))
        && grads.iter().any(|l| l.starts_with("detector_loss"))
        && elapsed < Duration::from_secs(60);
    Ok((ok, format!("{} checks, {:.1}s", grads.len(), elapsed.as_secs_f64())))
}

fn metric_oracle(run: &Run) -> Outcome {
    let report = read(&run.dir("selftest/selftest/report.txt"))?;
    let line = report
        .lines()
        .find(|l| l.starts_with("average_precision"))
        .ok_or("no AP line in report")?;
    let start = Instant::now();
    let a = Rect::new(0.0, 0.0, 2.0, 2.0);
    let fixtures = iou(&a, &a).map_err(|e| e.to_string())? == 1.0
        && iou(&a, &Rect::new(5.0, 5.0, 6.0, 6.0)).map_err(|e| e.to_string())? == 0.0
        && iou(&a, &Rect::new(1.0, 1.0, 3.0, 3.0)).map_err(|e| e.to_string())? == 1.0 / 7.0;
    let ok = line.ends_with("PASS") && line.split(',').nth(1) == Some("1000") && fixtures;
    Ok((ok, format!("{line}; iou fixtures {fixtures} ({:.2}s)", start.elapsed().as_secs_f64())))
}

fn round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (input, stride) = (64usize, 8usize);
    let grid = input / stride;
    let anchors = AnchorSet::new(vec![(5.0, 5.0), (10.0, 12.0), (20.0, 18.0)], input).map_err(|e| e.to_string())?;
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (w, h) = (rng.gen_range(2.0..30.0), rng.gen_range(2.0..30.0));
        let (x0, y0) = (rng.gen_range(0.0..64.0 - w), rng.gen_range(0.0..64.0 - h));
        let gt = Rect::new(x0, y0, x0 + w, y0 + h);
        let t = encode_targets(&[gt], &anchors, grid, input, 0.5).map_err(|e| e.to_string())?;
        let mut pred = vec![-30.0f64; t.kinds.len() * 5];
        for (s, k) in t.kinds.iter().enumerate() {
            if *k == SlotKind::Positive {
                let v = t.values[s];
                pred[s * 5..s * 5 + 5].copy_from_slice(&[logit(v[0]), logit(v[1]), v[2], v[3], 30.0]);
            }
        }
        let pred = Tensor::new(vec![grid, grid, anchors.len() * 5], pred).map_err(|e| e.to_string())?;
        let found = decode(&pred, &anchors, stride, 0.5).map_err(|e| e.to_string())?;
        if found.len() != 1 {
            return Ok((false, format!("{} detections for one box", found.len())));
        }
        let b = found[0].bbox;
        for d in [b.x_min - gt.x_min, b.y_min - gt.y_min, b.x_max - gt.x_max, b.y_max - gt.y_max] {
            worst = worst.max(d.abs());
        }
    }
    Ok((worst < 1e-4, format!("200 boxes, worst error {worst:.2e} px")))
}

/// Full desk-profile classifier run per seed.
fn classifier(run: &Run) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for seed in SEEDS {
        let out = run.dir(&format!("cls-{seed}"));
        let (_, elapsed) = run.pepipe(&["--seed", &seed.to_string(), "--out", path(&out), "train-classifier"])?;
        let s = summary(&out.join("classifier/summary.txt"))?;
        let acc = number(&s, "final_val_accuracy")?;
        let split = (number(&s, "train_images")?, number(&s, "val_images")?);
        let bar = if seed == 7 { 0.90 } else { 0.85 };
        ok &= acc >= bar && split == (400.0, 100.0);
        if seed == 7 {
            ok &= elapsed <= CLASSIFIER_BUDGET;
        }
        notes.push(format!("seed {seed}: {acc:.3} in {:.0}s", elapsed.as_secs_f64()));
    }
    Ok((ok, notes.join(", ")))
}

/// 10 fine-tune epochs from the pretext backbone vs from scratch.
fn transfer(run: &Run) -> Outcome {
    let mut pre = Vec::new();
    let mut scratch = Vec::new();
    for seed in SEEDS {
        let backbone = run.dir(&format!("cls-{seed}/classifier/backbone.ckpt"));
        for (mode, acc) in [("pretrained", &mut pre), ("scratch", &mut scratch)] {
            let out = run.dir(&format!("transfer-{mode}-{seed}"));
            let mut args = vec!["--seed".to_string(), seed.to_string(), "--out".into(), path(&out).into()];
            args.extend(["train-classifier".into(), "--epochs".into(), "10".into()]);
            if mode == "pretrained" {
                args.extend(["--pretrained".into(), path(&backbone).into()]);
            } else {
                args.push("--scratch".into());
            }
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            run.pepipe(&args)?;
            acc.push(number(&summary(&out.join("classifier/summary.txt"))?, "final_val_accuracy")?);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p, s) = (mean(&pre), mean(&scratch));
    Ok((p >= s, format!("pretrained {p:.3} {pre:?} vs scratch {s:.3} {scratch:?}")))
}

fn detector(run: &Run) -> Outcome {
    let out = run.dir("det");
    let (_, elapsed) = run.pepipe(&["--out", path(&out), "train-detector"])?;
    let s = summary(&out.join("detector/summary.txt"))?;
    let ap = number(&s, "best_val_ap50")?;
    let split = (number(&s, "train_images")?, number(&s, "val_images")?);
    run.pepipe(&["--out", path(&out), "eval-detector"])?;
    let metrics = read(&out.join("eval-detector/metrics.csv"))?;
    let aps: Vec<f64> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap_or("nan").parse().unwrap_or(f64::NAN))
        .collect();
    let monotone = aps.len() == 9 && aps.windows(2).all(|w| w[1] <= w[0]);
    let ok = ap >= 0.60 && elapsed <= DETECTOR_BUDGET && monotone && split == (573.0, 100.0);
    Ok((
        ok,
        format!(
            "best AP@0.5 {ap:.3} in {:.0}s, sweep {:?}",
            elapsed.as_secs_f64(),
            aps.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    ))
}

const TABLE: [(&str, f64); 9] = [
    ("MobileNet", 91.63),
    ("InceptionResNet", 84.36),
    ("InceptionV3", 83.52),
    ("ResNet50", 83.45),
    ("VGG16", 82.65),
    ("DenseNet", 80.80),
    ("NasNet", 77.35),
    ("EfficientNetB2", 66.29),
    ("EfficientNetB3", 61.40),
];

/// Writes one 40-epoch log per model whose last 20 epochs average to its
/// score, then ranks them through the CLI.
fn ranking(run: &Run) -> Outcome {
    let dir = run.dir("rank-logs");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for (i, (name, score)) in TABLE.iter().enumerate().rev() {
        let mut text = format!("# model={name}\n# param_count={}\n# seed=0\n# initial_val_accuracy=0.5\n", 1000 + i);
        text.push_str("epoch,train_loss,val_accuracy\n");
        for e in 1..=40 {
            let acc = if e <= 20 {
                0.5 + 0.9 * (score / 100.0 - 0.5) * e as f64 / 20.0 + 0.02 * (e % 3) as f64
            } else {
                score / 100.0 + if e % 2 == 0 { 0.015 } else { -0.015 }
            };
            text.push_str(&format!("{e},{:.6},{acc:.6}\n", 1.0 / e as f64));
        }
        let p = dir.join(format!("{name}.csv"));
        fs::write(&p, text).map_err(|e| e.to_string())?;
        files.push(p);
    }
    let out = run.dir("rank");
    let mut args = vec!["--out", path(&out), "rank"];
    args.extend(files.iter().map(|p| path(p)));
    run.pepipe(&args)?;
    let csv = read(&out.join("rank/ranking.csv"))?;
    let order: Vec<String> = csv
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1).map(str::to_string))
        .collect();
    let expected: Vec<String> = TABLE.iter().map(|t| t.0.to_string()).collect();
    Ok((order == expected, order.join(" > ")))
}

fn fusion(run: &Run) -> Outcome {
    let cfg = FusionConfig::default();
    let cls = |p: f64| ClassifierOutput { p_yes: p, p_no: 1.0 - p };
    let det = |c: f64| Detection::new(Rect::new(10.0, 10.0, 20.0, 20.0), c);
    let v = fuse(&cls(0.999), &[det(0.52), det(0.94)], &cfg).map_err(|e| e.to_string())?;
    let fixture = v.verdict == Verdict::Positive && v.rule_trace.iter().any(|f| f.rule == Rule::R1);

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut monotone = true;
    for _ in 0..10_000 {
        let (p, c) = (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0));
        let base = fuse(&cls(p), &[det(c)], &cfg).map_err(|e| e.to_string())?.verdict;
        let up_p = fuse(&cls(rng.gen_range(p..=1.0)), &[det(c)], &cfg).map_err(|e| e.to_string())?.verdict;
        let up_c = fuse(&cls(p), &[det(rng.gen_range(c..=1.0))], &cfg).map_err(|e| e.to_string())?.verdict;
        monotone &= up_p >= base && up_c >= base;
    }

    let fixture_png = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/positive.png");
    let out = run.dir("predict");
    let (stdout, _) = run.pepipe(&["--out", path(&out), "predict", path(&fixture_png)])?;
    let predicted = stdout.contains("\"verdict\":\"positive\"")
        && out.join("predict/overlays/positive.overlay.png").is_file();
    Ok((
        fixture && monotone && predicted,
        format!("fixture {fixture}, monotone over 10000 triples {monotone}, shipped checkpoints on positive.png {predicted}"),
    ))
}

/// Reruns every subcommand on a small config and compares artifact digests,
/// with one and four workers.
fn determinism(run: &Run) -> Outcome {
    let config = run.dir("tiny.toml");
    fs::write(
        &config,
        "[phantom]\nn_positive = 24\nn_negative = 24\n\n[data]\ndetection_images = 40\n\n\
         [pretext]\nimages = 40\nepochs = 1\n\n[classifier]\nepochs = 2\n\n\
         [detector]\niterations = 6\neval_every = 3\nbatch_size = 4\n",
    )
    .map_err(|e| e.to_string())?;
    let fixture = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let logs = run.dir("rank-logs");
    let mut digests = Vec::new();
    for workers in ["1", "4", "4"] {
        // same output root each time, so recorded paths match too
        let out = run.dir("det-run");
        if out.exists() {
            fs::remove_dir_all(&out).map_err(|e| e.to_string())?;
        }
        let base = ["--config", path(&config), "--out", path(&out), "--workers", workers];
        let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
        let cls_ckpt = out.join("classifier/best.ckpt");
        let det_ckpt = out.join("detector/best.ckpt");
        let mobilenet = logs.join("MobileNet.csv");
        let vgg = logs.join("VGG16.csv");
        let steps: Vec<Vec<String>> = vec![
            with(&["phantom", "gen"]),
            with(&["pretrain"]),
            with(&["train-classifier"]),
            with(&["train-detector"]),
            with(&["eval-classifier"]),
            with(&["eval-detector"]),
            with(&["rank", path(&mobilenet), path(&vgg)]),
            with(&[
                "predict",
                path(&fixture),
                "--classifier",
                path(&cls_ckpt),
                "--detector",
                path(&det_ckpt),
            ]),
            with(&["selftest", "--instances", "5", "--ap-instances", "50"]),
        ];
        for step in &steps {
            let args: Vec<&str> = step.iter().map(String::as_str).collect();
            run.pepipe(&args)?;
        }
        digests.push(digest_tree(&out)?);
    }
    let files = digests[0].len();
    let differing: Vec<&String> = digests[0]
        .iter()
        .filter(|(k, v)| digests[1..].iter().any(|d| d.get(*k) != Some(*v)))
        .map(|(k, _)| k)
        .collect();
    let same_set = digests.iter().all(|d| d.keys().eq(digests[0].keys()));
    let ok = same_set && differing.is_empty() && files > 20;
    Ok((ok, format!("{files} artifacts over 9 subcommands x 3 runs, differing: {differing:?}")))
}

fn main() {
    let temp = tempfile::tempdir().expect("temp dir");
    let run = Run {
        root: temp.path().to_path_buf(),
    };
    type Check = fn(&Run) -> Outcome;
    let checks: [(&str, Check); 9] = [
        ("gradient oracle", gradient_oracle),
        ("metric oracle", metric_oracle),
        ("round-trip law", |_| round_trip()),
        ("ranking reproduction", ranking),
        ("fusion fixture", fusion),
        ("determinism", determinism),
        ("desk-scale classifier", classifier),
        ("transfer benefit", transfer),
        ("desk-scale detector", detector),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let (ok, detail) = match check(&run) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!ok);
        println!(
            "{} {name}: {detail} [{:.0}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
