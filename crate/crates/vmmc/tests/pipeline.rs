use std::fs;
use std::path::Path;

use image::RgbImage;
use vmmc::checkpoint::{load_classifier, load_detector, read_classifier_metrics};
use vmmc::detection::open_rgb;
use vmmc::evaluation::{evaluate_files, read_predictions, Metric};
use vmmc::manifest::{load_manifest, parse_records, to_csv_string};
use vmmc::pipeline::{crop_largest_car, run_experiment, ExperimentConfig, ExperimentId, PipelineError};
use vmmc::synth::{generate_corpus, SynthConfig};
use vmmc_core::annotation::{DetectionCandidate, CAR_CATEGORY};
use vmmc_core::dataset::{DatasetManifest, Source};
use vmmc_core::BoundingBox;
use vmmc_nn::ssd::SsdSpec;

/// Finds a car in the middle of every frame except those whose width is a
/// multiple of five.
fn stub(img: &RgbImage) -> Vec<DetectionCandidate> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if img.width() % 5 == 0 {
        return vec![];
    }
    let bbox = BoundingBox::pixel(w * 0.13, h * 0.21, w * 0.87, h * 0.9).unwrap();
    vec![DetectionCandidate { bbox, confidence: 0.9, detector_class: CAR_CATEGORY.into() }]
}

type Stub = fn(&RgbImage) -> Vec<DetectionCandidate>;

fn tiny(experiment: ExperimentId) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(experiment, 5);
    cfg.fractions = if experiment == ExperimentId::III { [0.5, 0.0, 0.5] } else { [0.5, 0.25, 0.25] };
    cfg.input_size = 48;
    cfg.train.epochs = 1;
    cfg.train.batch_size = 8;
    cfg.detector = SsdSpec { input_size: 32, backbone: vec![4, 8], extras: vec![8], sources: vec![1, 2], labels: cfg.detector.labels.clone(), variances: [0.1, 0.2] };
    cfg.detector_train.epochs = 1;
    cfg.detector_train.batch_size = 8;
    cfg
}

fn corpus(dir: &Path) -> DatasetManifest {
    generate_corpus(dir, &SynthConfig { per_class: 4, seed: 11, ..Default::default() }).unwrap();
    load_manifest(&dir.join("manifest.csv")).unwrap()
}

#[test]
fn experiment_one_writes_a_loadable_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let run = dir.path().join("run1");
    let report = run_experiment::<Stub>(&tiny(ExperimentId::I), &data, dir.path(), None, None, &run).unwrap();
    assert_eq!(report.split, [14, 7, 7]);
    assert!(report.valid_score.is_some());
    assert_eq!(report.fallbacks, 0);
    for f in ["config.json", "metrics.csv", "weights.safetensors", "confusion.csv", "confusion.png", "preds.jsonl", "report.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(!run.join("detections.csv").exists());
    assert_eq!(read_classifier_metrics(&run.join("metrics.csv")).unwrap().len(), 1);
    let loaded = load_classifier(&run).unwrap();
    assert_eq!(loaded.net.spec().trainable_parameters(), report.parameter_count);

    let preds = read_predictions(&run.join("preds.jsonl")).unwrap();
    assert_eq!(preds.len(), 7);
    let acc = evaluate_files(&preds, &data, Metric::Accuracy, 0.5, &dir.path().join("eval")).unwrap();
    assert!((acc["accuracy"].as_f64().unwrap() - report.test_score).abs() < 1e-12);
}

#[test]
fn experiment_two_crops_falls_back_and_records_its_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let run1 = dir.path().join("run1");
    let run2 = dir.path().join("run2");
    let r1 = run_experiment::<Stub>(&tiny(ExperimentId::I), &data, dir.path(), None, None, &run1).unwrap();
    let cfg = tiny(ExperimentId::II);
    assert!(matches!(run_experiment::<Stub>(&cfg, &data, dir.path(), None, None, &run2), Err(PipelineError::MissingDetector)));

    let det: Stub = stub;
    let r2 = run_experiment(&cfg, &data, dir.path(), Some(&det), None, &run2).unwrap();
    assert_eq!(r1.parameter_count, r2.parameter_count);
    let widths: Vec<u32> = data.records().iter().map(|r| r.size.unwrap().width).collect();
    assert_eq!(r2.fallbacks, widths.iter().filter(|w| *w % 5 == 0).count());
    assert!(r2.fallbacks > 0 && r2.fallbacks < data.len());

    // The rows handed on as ground truth are exactly the crop boxes.
    let bytes = fs::read_to_string(run2.join("detections.csv")).unwrap();
    let rows = parse_records(&bytes).unwrap();
    assert_eq!(to_csv_string(&rows), bytes);
    assert_eq!(rows.len(), data.len() - r2.fallbacks);
    for row in &rows {
        assert_eq!(row.source, Source::Auto);
        let img = open_rgb(&dir.path().join(&row.image_path)).unwrap();
        let (bbox, crop) = crop_largest_car(&img, &det, cfg.car_floor).unwrap().unwrap();
        assert_eq!(row.bbox, Some(bbox));
        assert_eq!((crop.width() as f64, crop.height() as f64), (bbox.x_max() - bbox.x_min(), bbox.y_max() - bbox.y_min()));
    }

    // Experiment III reads those rows back unchanged.
    let gt_path = dir.path().join("detections.csv");
    fs::write(&gt_path, &bytes).unwrap();
    let gt = load_manifest(&gt_path).unwrap();
    assert_eq!(to_csv_string(gt.records()), bytes);
    let run3 = dir.path().join("run3");
    let r3 = run_experiment::<Stub>(&tiny(ExperimentId::III), &gt, dir.path(), None, None, &run3).unwrap();
    assert_eq!(r3.split[0] + r3.split[2], rows.len());
}

#[test]
fn experiment_three_reports_one_held_out_score() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let run = dir.path().join("run3");
    let cfg = tiny(ExperimentId::III);
    let report = run_experiment::<Stub>(&cfg, &data, dir.path(), None, None, &run).unwrap();
    assert!(report.valid_score.is_none());
    assert_eq!(report.split, [14, 0, 14]);
    assert!((0.0..=1.0).contains(&report.test_score));
    let map: serde_json::Value = serde_json::from_slice(&fs::read(run.join("map.json")).unwrap()).unwrap();
    assert!((map["map"].as_f64().unwrap() - report.test_score).abs() < 1e-12);
    assert!(map["train_map"].is_number() && map["mean_localization_iou"].is_number());
    let loaded = load_detector(&run).unwrap();
    assert_eq!(loaded.net.spec(), &cfg.detector);

    let preds = read_predictions(&run.join("preds.jsonl")).unwrap();
    let again = evaluate_files(&preds, &data, Metric::Map, cfg.map_iou, &dir.path().join("eval")).unwrap();
    assert!((again["map"].as_f64().unwrap() - report.test_score).abs() < 1e-9);
}

#[test]
fn experiment_three_needs_every_box() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let mut records = data.into_records();
    records[3].bbox = None;
    let data = DatasetManifest::new(records).unwrap();
    let err = run_experiment::<Stub>(&tiny(ExperimentId::III), &data, dir.path(), None, None, &dir.path().join("r")).unwrap_err();
    assert!(matches!(err, PipelineError::MissingBox(_)));
}

#[test]
fn runs_are_reproducible_from_their_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let cfg = tiny(ExperimentId::I);
    let a = run_experiment::<Stub>(&cfg, &data, dir.path(), None, None, &dir.path().join("a")).unwrap();
    let stored: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a/config.json")).unwrap()).unwrap();
    let replay: ExperimentConfig = serde_json::from_value(stored["run"]["experiment"].clone()).unwrap();
    assert_eq!(replay, cfg);
    let b = run_experiment::<Stub>(&replay, &data, dir.path(), None, None, &dir.path().join("b")).unwrap();
    assert_eq!((a.train_score, a.valid_score, a.test_score), (b.train_score, b.valid_score, b.test_score));
    assert_eq!(fs::read(dir.path().join("a/preds.jsonl")).unwrap(), fs::read(dir.path().join("b/preds.jsonl")).unwrap());
}
