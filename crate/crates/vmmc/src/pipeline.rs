//! The three experiments.
//!
//! Experiment I trains the classifier on whole frames. Experiment II first
//! crops the largest car found by the car detector and trains the same
//! classifier on the crops. Experiment III fine-tunes a seven-class detector
//! on ground-truth boxes and scores it by mean average precision.
//!
//! Every run writes its artifacts into one directory: `config.json`,
//! `metrics.csv`, `weights.safetensors`, `report.json`, `preds.jsonl`, plus
//! `confusion.csv`/`confusion.png` for I and II and `detections.csv` for II.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use vmmc_core::annotation::{DetectionCandidate, CAR_CATEGORY};
use vmmc_core::dataset::{DatasetManifest, ImageRecord, Source};
use vmmc_core::matching::GroundTruth;
use vmmc_core::metrics::{confusion_matrix_n, mean_average_precision, ConfusionMatrix, ImageDetection, ImageTruth, MapReport, MetricsError};
use vmmc_core::split::{split_indices, SplitError, SplitSpec};
use vmmc_core::{BoundingBox, ClassId, CLASS_LABELS, NUM_CLASSES};
use vmmc_nn::ssd::{build_detector, fine_tune, DetSample, DetTrainConfig, DetectConfig, SsdNetwork, SsdSpec};
use vmmc_nn::train::evaluate;
use vmmc_nn::{build_network, fit, ClassifierNetwork, ClassifierSpec, LabeledImage, Module, NnError, Tensor, TrainConfig, TrainReport};

use crate::checkpoint::{save_classifier, save_detector, CheckpointConfig, CheckpointError, ModelConfig};
use crate::detection::{detect_image, open_rgb, snap_box, DetectionError, FrameDetector};
use crate::evaluation::{map_json, mean_localization_iou, score_entries, write_confusion, write_predictions, DetectionEntry, EvalError, PredictionLine};
use crate::imaging::{augment_chw, preprocess_rgb, to_chw, AugmentationConfig, ImagingError, Letterbox, DEFAULT_INPUT_SIZE};
use crate::manifest::{to_csv_string, write_atomic};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("experiment II needs a car detector")]
    MissingDetector,
    #[error("experiment III needs a box for every image; {0:?} has none")]
    MissingBox(String),
    #[error("class {0} has no training images")]
    EmptyClass(ClassId),
    #[error("cannot read {path:?}: {source}")]
    Image { path: String, source: image::ImageError },
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum ExperimentId {
    I,
    II,
    III,
}

impl ExperimentId {
    pub fn number(self) -> u8 {
        match self {
            ExperimentId::I => 1,
            ExperimentId::II => 2,
            ExperimentId::III => 3,
        }
    }
}

impl From<ExperimentId> for u8 {
    fn from(id: ExperimentId) -> u8 {
        id.number()
    }
}

impl TryFrom<u8> for ExperimentId {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, String> {
        match n {
            1 => Ok(ExperimentId::I),
            2 => Ok(ExperimentId::II),
            3 => Ok(ExperimentId::III),
            _ => Err(format!("experiment must be 1, 2 or 3, not {n}")),
        }
    }
}

/// Everything a run depends on besides its data; stored in `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub seed: u64,
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    /// Classifier input side for I and II.
    pub input_size: u32,
    pub train: TrainConfig,
    pub augmentation: AugmentationConfig,
    /// Minimum car confidence for a crop in II.
    pub car_floor: f64,
    pub detector: SsdSpec,
    pub detector_train: DetTrainConfig,
    /// Detection settings used for scoring III.
    pub detect: DetectConfig,
    pub map_iou: f64,
}

fn detector_labels() -> Vec<String> {
    CLASS_LABELS.iter().map(|l| l.model.to_string()).collect()
}

/// Augmentation defaults with the blur range scaled from its 300-pixel
/// value to `input_size`.
pub fn augmentation_for(input_size: u32) -> AugmentationConfig {
    let base = AugmentationConfig::default();
    let scale = input_size as f32 / DEFAULT_INPUT_SIZE as f32;
    AugmentationConfig { blur_sigma_range: (base.blur_sigma_range.0 * scale, base.blur_sigma_range.1 * scale), ..base }
}

impl ExperimentConfig {
    /// Full-size settings: 300-pixel inputs, 100 classifier epochs, 30
    /// detector epochs, batch 32.
    pub fn paper(experiment: ExperimentId, seed: u64) -> Self {
        let fractions = match experiment {
            ExperimentId::III => [0.8, 0.0, 0.2],
            _ => [0.8, 0.1, 0.1],
        };
        Self {
            experiment,
            seed,
            fractions,
            input_size: DEFAULT_INPUT_SIZE,
            train: TrainConfig { seed, ..Default::default() },
            augmentation: augmentation_for(DEFAULT_INPUT_SIZE),
            car_floor: 0.1,
            detector: SsdSpec::ssd300(detector_labels()),
            detector_train: DetTrainConfig { seed, ..Default::default() },
            detect: DetectConfig { report_floor: 0.01, ..Default::default() },
            map_iou: 0.5,
        }
    }

    /// Settings sized for a single CPU: 128-pixel classifier inputs, 10
    /// classifier epochs and the compact detector.
    pub fn desk(experiment: ExperimentId, seed: u64) -> Self {
        let base = Self::paper(experiment, seed);
        Self {
            input_size: 128,
            train: TrainConfig { epochs: 10, ..base.train.clone() },
            augmentation: augmentation_for(128),
            detector: SsdSpec::compact(detector_labels()),
            ..base
        }
    }

    pub fn classifier_spec(&self) -> ClassifierSpec {
        ClassifierSpec::default().with_input_size(self.input_size as usize)
    }
}

/// Scores of one run. For III the train and test scores are mAP values and
/// `valid_score` is absent: the held-out set plays both roles.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentId,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub parameter_count: usize,
    /// Train, validation and test sizes.
    pub split: [usize; 3],
    pub train_score: f64,
    pub valid_score: Option<f64>,
    pub test_score: f64,
    pub best_epoch: Option<usize>,
    /// Images of II classified on the whole frame because no car was found.
    pub fallbacks: usize,
    pub mean_localization_iou: Option<f64>,
    #[serde(skip)]
    pub confusion: Option<ConfusionMatrix>,
    #[serde(skip)]
    pub map: Option<MapReport>,
}

/// Crop of the largest car at or above `floor`, with the whole-pixel box it
/// was cut from. `None` when no car qualifies.
pub fn crop_largest_car<D: FrameDetector + ?Sized>(image: &RgbImage, detector: &D, floor: f64) -> Result<Option<(BoundingBox, RgbImage)>, DetectionError> {
    let candidates = detector.detect_cars(image)?;
    let mut best: Option<&DetectionCandidate> = None;
    for c in &candidates {
        if c.detector_class != CAR_CATEGORY || c.confidence < floor {
            continue;
        }
        if best.is_none_or(|b| c.bbox.area() > b.bbox.area()) {
            best = Some(c);
        }
    }
    let Some(bbox) = best.and_then(|c| snap_box(&c.bbox, image.width(), image.height())) else {
        return Ok(None);
    };
    let crop = image::imageops::crop_imm(image, bbox.x_min() as u32, bbox.y_min() as u32, bbox.width() as u32, bbox.height() as u32).to_image();
    Ok(Some((bbox, crop)))
}

/// Trains a fresh classifier with best-validation checkpoint selection.
/// Every class must appear among the training images.
pub fn train_classifier(train: &[LabeledImage], val: &[LabeledImage], spec: &ClassifierSpec, cfg: &TrainConfig, aug: &AugmentationConfig) -> Result<(ClassifierNetwork, TrainReport), PipelineError> {
    let mut seen = [false; NUM_CLASSES];
    for d in train {
        if let Some(s) = seen.get_mut(d.label) {
            *s = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(PipelineError::EmptyClass(ClassId::from_index(missing).expect("class index")));
    }
    aug.validate()?;
    let size = spec.input_size as u32;
    let mut net = build_network(spec, cfg.seed)?;
    let report = fit(&mut net, train, val, cfg, |px, rng| augment_chw(px, size, aug, rng))?;
    Ok((net, report))
}

/// Class probabilities for each image, batched.
pub fn classify_all(net: &ClassifierNetwork, images: &[LabeledImage], batch: usize) -> Result<Vec<Vec<f64>>, NnError> {
    let spec = net.spec();
    let s = spec.input_size;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let data: Vec<f32> = chunk.iter().flat_map(|d| d.pixels.iter().copied()).collect();
        out.extend(net.probabilities(&Tensor::from_vec([chunk.len(), spec.input_channels, s, s], data)?)?);
    }
    Ok(out)
}

fn load(root: &Path, r: &ImageRecord) -> Result<RgbImage, PipelineError> {
    open_rgb(&root.join(&r.image_path)).map_err(|source| PipelineError::Image { path: r.image_path.clone(), source })
}

/// Classifier inputs for I (no detector) or II, with the crop box of each
/// image in II.
struct Prepared {
    images: Vec<LabeledImage>,
    crops: Vec<Option<BoundingBox>>,
}

fn prepare<D: FrameDetector + ?Sized>(records: &[ImageRecord], root: &Path, size: u32, car: Option<(&D, f64)>) -> Result<Prepared, PipelineError> {
    let mut images = Vec::with_capacity(records.len());
    let mut crops = Vec::with_capacity(records.len());
    for r in records {
        let img = load(root, r)?;
        let found = match car {
            Some((det, floor)) => crop_largest_car(&img, det, floor)?,
            None => None,
        };
        let pixels = match &found {
            Some((_, crop)) => to_chw(&preprocess_rgb(crop, size)?),
            None => to_chw(&preprocess_rgb(&img, size)?),
        };
        images.push(LabeledImage { pixels, label: r.class_id.index() });
        crops.push(found.map(|(b, _)| b));
    }
    Ok(Prepared { images, crops })
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

fn parameter_count(m: &dyn Module) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| {
        if p.trainable {
            n += p.len();
        }
    });
    n
}

/// Rows in manifest format for every image that got a car box in II.
pub fn detection_records(records: &[ImageRecord], crops: &[Option<BoundingBox>]) -> Vec<ImageRecord> {
    records
        .iter()
        .zip(crops)
        .filter_map(|(r, b)| b.map(|bbox| ImageRecord { image_path: r.image_path.clone(), class_id: r.class_id, bbox: Some(bbox), source: Source::Auto, size: None }))
        .collect()
}

fn write_report(run_dir: &Path, report: &ExperimentReport) -> Result<(), PipelineError> {
    write_atomic(&run_dir.join("report.json"), &serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

/// Runs one experiment on `manifest` (paths relative to `root`) and writes
/// its artifacts into `run_dir`. II needs `car`; III initializes its
/// backbone from `backbone` when given.
pub fn run_experiment<D: FrameDetector + ?Sized>(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    root: &Path,
    car: Option<&D>,
    backbone: Option<&SsdNetwork>,
    run_dir: &Path,
) -> Result<ExperimentReport, PipelineError> {
    fs::create_dir_all(run_dir)?;
    match cfg.experiment {
        ExperimentId::I => run_classification(cfg, manifest, root, None::<&D>, run_dir),
        ExperimentId::II => run_classification(cfg, manifest, root, Some(car.ok_or(PipelineError::MissingDetector)?), run_dir),
        ExperimentId::III => run_detection(cfg, manifest, root, backbone, run_dir),
    }
}

fn run_classification<D: FrameDetector + ?Sized>(cfg: &ExperimentConfig, manifest: &DatasetManifest, root: &Path, car: Option<&D>, run_dir: &Path) -> Result<ExperimentReport, PipelineError> {
    let records = manifest.records();
    let classes: Vec<ClassId> = records.iter().map(|r| r.class_id).collect();
    let split = split_indices(&classes, &SplitSpec::new(cfg.seed, cfg.fractions)?)?;
    let spec = cfg.classifier_spec();
    let prepared = prepare(records, root, cfg.input_size, car.map(|d| (d, cfg.car_floor)))?;
    let fallbacks = if car.is_some() { prepared.crops.iter().filter(|c| c.is_none()).count() } else { 0 };

    let train = pick(&prepared.images, &split.train);
    let val = pick(&prepared.images, &split.val);
    let test = pick(&prepared.images, &split.test);
    let (net, train_report) = train_classifier(&train, &val, &spec, &cfg.train, &cfg.augmentation)?;

    let batch = cfg.train.batch_size;
    let (_, train_score, _) = evaluate(&net, &train, batch)?;
    let (_, valid_score, _) = evaluate(&net, &val, batch)?;
    let probs = classify_all(&net, &test, batch)?;
    let mut lines = Vec::with_capacity(test.len());
    let mut preds = Vec::with_capacity(test.len());
    for (&i, p) in split.test.iter().zip(&probs) {
        let scores = vmmc_core::ClassScores::from_probabilities(p).map_err(|e| NnError::Numeric(e.to_string()))?;
        preds.push(scores.top().0.index());
        lines.push(PredictionLine { image_path: records[i].image_path.clone(), scores: Some(score_entries(&scores)), detections: None });
    }
    let truths: Vec<usize> = test.iter().map(|d| d.label).collect();
    let confusion = confusion_matrix_n(&truths, &preds, NUM_CLASSES)?;
    let test_score = vmmc_core::metrics::accuracy(&confusion)?;

    let config = CheckpointConfig {
        model: ModelConfig::Classifier { spec: spec.clone(), train: cfg.train.clone(), augmentation: cfg.augmentation },
        run: serde_json::json!({ "experiment": cfg, "records": records.len() }),
    };
    save_classifier(run_dir, &net, &config, &train_report.epochs)?;
    write_confusion(&confusion, &run_dir.join("confusion.csv"), &run_dir.join("confusion.png"))?;
    write_predictions(&run_dir.join("preds.jsonl"), &lines)?;
    if car.is_some() {
        write_atomic(&run_dir.join("detections.csv"), to_csv_string(&detection_records(records, &prepared.crops)).as_bytes())?;
    }

    let report = ExperimentReport {
        experiment: cfg.experiment,
        seed: cfg.seed,
        run_dir: run_dir.to_path_buf(),
        parameter_count: parameter_count(&net),
        split: [split.train.len(), split.val.len(), split.test.len()],
        train_score,
        valid_score: Some(valid_score),
        test_score,
        best_epoch: Some(train_report.best_epoch),
        fallbacks,
        mean_localization_iou: None,
        confusion: Some(confusion),
        map: None,
    };
    write_report(run_dir, &report)?;
    Ok(report)
}

/// Copies every `backbone*` parameter whose shape matches; returns how many
/// tensors were copied.
pub fn copy_backbone(src: &SsdNetwork, dst: &mut SsdNetwork) -> usize {
    let mut values = std::collections::HashMap::new();
    src.visit("", &mut |name, p| {
        if name.starts_with("backbone") {
            values.insert(name.to_string(), (p.shape.clone(), p.value.clone()));
        }
    });
    let mut copied = 0;
    dst.visit_mut("", &mut |name, p| {
        if let Some((shape, value)) = values.get(name) {
            if *shape == p.shape {
                p.value.clone_from(value);
                copied += 1;
            }
        }
    });
    copied
}

/// Detector sample and normalized truth box of one record.
fn detector_sample(root: &Path, r: &ImageRecord, size: u32) -> Result<(DetSample, BoundingBox, RgbImage), PipelineError> {
    let img = load(root, r)?;
    let bbox = r.bbox.ok_or_else(|| PipelineError::MissingBox(r.image_path.clone()))?;
    let lb = Letterbox::new(img.width(), img.height());
    let square = lb.box_to_square(&bbox).ok_or_else(|| PipelineError::MissingBox(r.image_path.clone()))?;
    let norm = bbox.to_normalized(img.width() as f64, img.height() as f64).map_err(|_| PipelineError::MissingBox(r.image_path.clone()))?;
    let sample = DetSample { pixels: to_chw(&preprocess_rgb(&img, size)?), boxes: vec![GroundTruth { bbox: square, class_id: r.class_id }] };
    Ok((sample, norm, img))
}

fn score_detector(net: &SsdNetwork, cfg: &ExperimentConfig, images: &[(usize, &RgbImage, BoundingBox, ClassId)]) -> Result<(MapReport, f64, Vec<Vec<DetectionEntry>>), PipelineError> {
    let mut dets = Vec::new();
    let mut truths = Vec::new();
    let mut entries = Vec::new();
    for &(image, img, bbox, class_id) in images {
        let found = detect_image(net, &cfg.detect, img)?;
        entries.push(found.iter().map(DetectionEntry::from).collect());
        dets.extend(found.into_iter().map(|detection| ImageDetection { image, detection }));
        truths.push(ImageTruth { image, class_id, bbox });
    }
    let report = mean_average_precision(&dets, &truths, cfg.map_iou)?;
    let loc = mean_localization_iou(&dets, &truths).unwrap_or(0.0);
    Ok((report, loc, entries))
}

fn run_detection(cfg: &ExperimentConfig, manifest: &DatasetManifest, root: &Path, backbone: Option<&SsdNetwork>, run_dir: &Path) -> Result<ExperimentReport, PipelineError> {
    let records = manifest.records();
    if let Some(r) = records.iter().find(|r| r.bbox.is_none()) {
        return Err(PipelineError::MissingBox(r.image_path.clone()));
    }
    let classes: Vec<ClassId> = records.iter().map(|r| r.class_id).collect();
    let split = split_indices(&classes, &SplitSpec::new(cfg.seed, cfg.fractions)?)?;
    let size = cfg.detector.input_size as u32;
    let mut samples = Vec::with_capacity(records.len());
    let mut norms = Vec::with_capacity(records.len());
    let mut frames = Vec::with_capacity(records.len());
    for r in records {
        let (s, n, img) = detector_sample(root, r, size)?;
        samples.push(s);
        norms.push(n);
        frames.push(img);
    }

    let mut net = build_detector(&cfg.detector, cfg.seed)?;
    if let Some(src) = backbone {
        let copied = copy_backbone(src, &mut net);
        log::info!("initialized {copied} backbone tensors from the car detector");
    }
    let train_samples = pick(&samples, &split.train);
    let metrics = fine_tune(&mut net, &train_samples, &cfg.detector_train)?;

    let held_out: Vec<usize> = split.val.iter().chain(&split.test).copied().collect();
    let view = |idx: &[usize]| -> Vec<(usize, &RgbImage, BoundingBox, ClassId)> { idx.iter().map(|&i| (i, &frames[i], norms[i], records[i].class_id)).collect() };
    let (train_map, _, _) = score_detector(&net, cfg, &view(&split.train))?;
    let (test_map, loc, entries) = score_detector(&net, cfg, &view(&held_out))?;

    let lines: Vec<PredictionLine> = held_out
        .iter()
        .zip(entries)
        .map(|(&i, d)| PredictionLine { image_path: records[i].image_path.clone(), scores: None, detections: Some(d) })
        .collect();
    let config = CheckpointConfig {
        model: ModelConfig::Detector { spec: cfg.detector.clone(), train: cfg.detector_train.clone(), detect: cfg.detect },
        run: serde_json::json!({ "experiment": cfg, "records": records.len(), "backbone_initialized": backbone.is_some() }),
    };
    save_detector(run_dir, &net, &config, &metrics)?;
    write_predictions(&run_dir.join("preds.jsonl"), &lines)?;
    let mut map = map_json(&test_map, cfg.map_iou);
    map["train_map"] = serde_json::json!(train_map.map);
    map["mean_localization_iou"] = serde_json::json!(loc);
    write_atomic(&run_dir.join("map.json"), &serde_json::to_vec_pretty(&map)?)?;

    let report = ExperimentReport {
        experiment: cfg.experiment,
        seed: cfg.seed,
        run_dir: run_dir.to_path_buf(),
        parameter_count: parameter_count(&net),
        split: [split.train.len(), split.val.len(), split.test.len()],
        train_score: train_map.map,
        valid_score: None,
        test_score: test_map.map,
        best_epoch: None,
        fallbacks: 0,
        mean_localization_iou: Some(loc),
        confusion: None,
        map: Some(test_map),
    };
    write_report(run_dir, &report)?;
    Ok(report)
}

/// `YYYYMMDD-HHMMSS` in UTC.
pub fn timestamp(t: SystemTime) -> String {
    let secs = t.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let (days, rem) = ((secs / 86_400) as i64, secs % 86_400);
    // Civil date from days since 1970-01-01 (proleptic Gregorian).
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = doy - (153 * mp + 2) / 5 + 1;
    let month = if mp < 10 { mp + 3 } else { mp - 9 };
    let year = yoe + era * 400 + i64::from(month <= 2);
    format!("{year:04}{month:02}{day:02}-{:02}{:02}{:02}", rem / 3600, rem % 3600 / 60, rem % 60)
}

/// Creates `out/<timestamp>-exp<id>`, adding a numeric suffix when that
/// directory already exists.
pub fn create_run_dir(out: &Path, experiment: ExperimentId) -> std::io::Result<PathBuf> {
    fs::create_dir_all(out)?;
    let base = format!("{}-exp{}", timestamp(SystemTime::now()), experiment.number());
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!("unbounded suffix search")
}
