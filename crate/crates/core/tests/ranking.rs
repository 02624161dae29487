//! Model ranking on fixture accuracy curves.

use std::path::Path;

use pepipe::classifier::{rank_models, ranking_csv, ClassifierConfig, EpochRecord, TrainRunLog};

/// 40 epochs whose final 20 average to `score` percent, with a noisy rise
/// before them so that earlier epochs do not leak into the score.
fn curve(model: &str, params_m: f64, score: f64, seed: usize) -> TrainRunLog {
    let target = score / 100.0;
    let mut records = Vec::new();
    for e in 1..=20 {
        records.push(EpochRecord {
            epoch: e,
            train_loss: 1.0 / e as f64,
            val_accuracy: 0.5 + (target - 0.5) * e as f64 / 20.0 * if e % 2 == 0 { 0.9 } else { 1.05 },
        });
    }
    // zero-mean wiggle over the tail
    for e in 21..=40 {
        let wiggle = 0.02 * if (e + seed) % 2 == 0 { 1.0 } else { -1.0 };
        records.push(EpochRecord {
            epoch: e,
            train_loss: 1.0 / e as f64,
            val_accuracy: target + wiggle,
        });
    }
    TrainRunLog {
        model: model.into(),
        param_count: (params_m * 1e6) as usize,
        seed: 0,
        initial_val_accuracy: 0.5,
        records,
        config: ClassifierConfig::default(),
    }
}

const TABLE: [(&str, f64, f64); 9] = [
    ("MobileNet", 3.0, 91.63),
    ("InceptionResNet", 55.2, 84.36),
    ("InceptionV3", 22.9, 83.52),
    ("ResNet50", 24.7, 83.45),
    ("VGG16", 15.0, 82.65),
    ("DenseNet", 7.6, 80.80),
    ("NasNet", 87.0, 77.35),
    ("EfficientNetB2", 9.1, 66.29),
    ("EfficientNetB3", 12.3, 61.40),
];

#[test]
fn fixture_curves_reproduce_the_published_order() {
    // shuffled input order
    let order = [6, 2, 8, 0, 4, 1, 7, 3, 5];
    let logs: Vec<TrainRunLog> = order
        .iter()
        .map(|&i| curve(TABLE[i].0, TABLE[i].1, TABLE[i].2, i))
        .collect();
    let rows = rank_models(&logs, 20).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.model.as_str()).collect();
    let expected: Vec<&str> = TABLE.iter().map(|t| t.0).collect();
    assert_eq!(names, expected);
    for (row, t) in rows.iter().zip(TABLE) {
        assert!((row.score * 100.0 - t.2).abs() < 1e-9);
    }
    assert_eq!(rows.iter().map(|r| r.rank).collect::<Vec<_>>(), (1..=9).collect::<Vec<_>>());
}

#[test]
fn ties_go_to_fewer_parameters_and_logs_round_trip() {
    let logs = vec![curve("big", 50.0, 80.0, 0), curve("small", 5.0, 80.0, 0)];
    let rows = rank_models(&logs, 20).unwrap();
    assert_eq!(rows[0].model, "small");
    assert!(ranking_csv(&rows).starts_with("rank,model,param_count,score\n"));

    let log = curve("MobileNet", 3.0, 91.63, 0);
    let back = TrainRunLog::from_csv(&log.to_csv(), Path::new("mobilenet.csv")).unwrap();
    assert_eq!(back.model, "MobileNet");
    assert_eq!(back.records.len(), 40);
    assert!(rank_models(&[back], 41).is_err());
}
