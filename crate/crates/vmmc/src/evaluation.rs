//! Prediction files, evaluation reports and the throughput benchmark.
//!
//! Predictions are JSON lines, one per image:
//! `{"image_path":"3-polo/00012.png","scores":[{"class":0,"prob":0.01},...]}`
//! for classifiers and
//! `{"image_path":...,"detections":[{"prob":0.9,"class":3,"bbox":[x0,y0,x1,y1]}]}`
//! for detectors, with boxes normalized to the source image.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use vmmc_core::dataset::DatasetManifest;
use vmmc_core::metrics::{accuracy, confusion_matrix_n, mean_average_precision, ConfusionMatrix, ImageDetection, ImageTruth, MapReport, MetricsError};
use vmmc_core::{BoundingBox, ClassId, ClassScores, Detection, NUM_CLASSES};

use crate::manifest::write_atomic;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("line {line}: {reason}")]
    BadPrediction { line: usize, reason: String },
    #[error("prediction for {0:?} has no ground truth")]
    UnknownImage(String),
    #[error("no predictions to evaluate")]
    NoPredictions,
    #[error("{0:?} has no {1}")]
    MissingField(String, &'static str),
    #[error("image stream is empty")]
    EmptyStream,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One class probability, the unit of the classifier output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub class: usize,
    pub prob: f64,
}

/// All seven classes in class-id order.
pub fn score_entries(scores: &ClassScores) -> Vec<ScoreEntry> {
    scores.entries().map(|(c, prob)| ScoreEntry { class: c.index(), prob }).collect()
}

/// Seven classes by descending probability.
pub fn ranked_entries(scores: &ClassScores) -> Vec<ScoreEntry> {
    scores.ranked().into_iter().map(|(c, prob)| ScoreEntry { class: c.index(), prob }).collect()
}

pub fn scores_from_entries(entries: &[ScoreEntry]) -> Option<ClassScores> {
    let mut probs = [f64::NAN; NUM_CLASSES];
    for e in entries {
        *probs.get_mut(e.class)? = e.prob;
    }
    ClassScores::from_probabilities(&probs).ok()
}

/// One detection: probability, class and normalized corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionEntry {
    pub prob: f64,
    pub class: usize,
    pub bbox: [f64; 4],
}

impl From<&Detection> for DetectionEntry {
    fn from(d: &Detection) -> Self {
        Self { prob: d.prob, class: d.class_id.index(), bbox: d.bbox.to_array() }
    }
}

impl DetectionEntry {
    pub fn to_detection(&self) -> Option<Detection> {
        let [x0, y0, x1, y1] = self.bbox;
        Some(Detection {
            prob: self.prob,
            class_id: ClassId::from_index(self.class).ok()?,
            bbox: BoundingBox::normalized(x0, y0, x1, y1).ok()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<ScoreEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<DetectionEntry>>,
}

pub fn write_predictions(path: &Path, lines: &[PredictionLine]) -> Result<(), EvalError> {
    let mut out = Vec::new();
    for l in lines {
        serde_json::to_writer(&mut out, l)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(&line).map_err(|e| EvalError::BadPrediction { line: i + 1, reason: e.to_string() })?;
        out.push(parsed);
    }
    Ok(out)
}

/// Header `truth,0,...,6`, then one row per true class.
pub fn confusion_csv(m: &ConfusionMatrix) -> String {
    let n = m.classes();
    let mut out = String::from("truth");
    for p in 0..n {
        out.push_str(&format!(",{p}"));
    }
    out.push('\n');
    for t in 0..n {
        out.push_str(&t.to_string());
        for v in m.row(t) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

const CELL: u32 = 32;

/// Heatmap of row-normalized counts: white for none, deep blue for a full
/// row, with grid lines between cells.
pub fn render_confusion(m: &ConfusionMatrix) -> RgbImage {
    let n = m.classes() as u32;
    let side = n * CELL + 1;
    let mut img = RgbImage::from_pixel(side, side, Rgb([96, 96, 96]));
    for t in 0..n {
        let row_total: u64 = m.row(t as usize).iter().sum();
        for p in 0..n {
            let frac = if row_total == 0 { 0.0 } else { m.get(t as usize, p as usize) as f64 / row_total as f64 };
            let shade = |full: f64| (255.0 - frac * (255.0 - full)).round() as u8;
            let color = Rgb([shade(8.0), shade(48.0), shade(107.0)]);
            for y in t * CELL + 1..(t + 1) * CELL {
                for x in p * CELL + 1..(p + 1) * CELL {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img
}

pub fn write_confusion(m: &ConfusionMatrix, csv_path: &Path, png_path: &Path) -> Result<(), EvalError> {
    write_atomic(csv_path, confusion_csv(m).as_bytes())?;
    render_confusion(m).save(png_path)?;
    Ok(())
}

/// JSON form of a mAP report; classes without ground truth show `null`.
pub fn map_json(report: &MapReport, iou_threshold: f64) -> serde_json::Value {
    let per_class: Vec<_> = report
        .per_class
        .iter()
        .enumerate()
        .map(|(i, ap)| {
            let label = ClassId::from_index(i).map(|c| c.label().display_name.to_string()).unwrap_or_default();
            serde_json::json!({ "class": i, "label": label, "ap": ap })
        })
        .collect();
    serde_json::json!({ "iou_threshold": iou_threshold, "map": report.map, "per_class": per_class })
}

/// Mean over ground truths of the best IoU reached by a same-class
/// detection on the same image; 0 for a missed object.
pub fn mean_localization_iou(detections: &[ImageDetection], truths: &[ImageTruth]) -> Option<f64> {
    if truths.is_empty() {
        return None;
    }
    let total: f64 = truths
        .iter()
        .map(|t| {
            detections
                .iter()
                .filter(|d| d.image == t.image && d.detection.class_id == t.class_id)
                .map(|d| t.bbox.iou_unchecked(&d.detection.bbox))
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / truths.len() as f64)
}

/// Which report `evaluate_files` produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Confusion,
    Map,
}

/// Classifier predictions matched against the manifest by image path.
pub fn classification_matrix(preds: &[PredictionLine], truth: &DatasetManifest) -> Result<ConfusionMatrix, EvalError> {
    let index: HashMap<&str, ClassId> = truth.records().iter().map(|r| (r.image_path.as_str(), r.class_id)).collect();
    let (mut t, mut p) = (Vec::new(), Vec::new());
    for line in preds {
        let class = *index.get(line.image_path.as_str()).ok_or_else(|| EvalError::UnknownImage(line.image_path.clone()))?;
        let entries = line.scores.as_ref().ok_or_else(|| EvalError::MissingField(line.image_path.clone(), "scores"))?;
        let scores = scores_from_entries(entries).ok_or_else(|| EvalError::MissingField(line.image_path.clone(), "valid seven-class scores"))?;
        t.push(class.index());
        p.push(scores.top().0.index());
    }
    if t.is_empty() {
        return Err(EvalError::NoPredictions);
    }
    Ok(confusion_matrix_n(&t, &p, NUM_CLASSES)?)
}

/// Detector predictions against manifest boxes. Truth boxes are normalized
/// with the probed image sizes; images without a prediction line count as
/// having no detections.
pub fn detection_inputs(preds: &[PredictionLine], truth: &DatasetManifest) -> Result<(Vec<ImageDetection>, Vec<ImageTruth>), EvalError> {
    let index: HashMap<&str, usize> = truth.records().iter().enumerate().map(|(i, r)| (r.image_path.as_str(), i)).collect();
    let mut detections = Vec::new();
    let mut evaluated = vec![false; truth.len()];
    for line in preds {
        let image = *index.get(line.image_path.as_str()).ok_or_else(|| EvalError::UnknownImage(line.image_path.clone()))?;
        evaluated[image] = true;
        for d in line.detections.as_deref().ok_or_else(|| EvalError::MissingField(line.image_path.clone(), "detections"))? {
            let detection = d.to_detection().ok_or_else(|| EvalError::MissingField(line.image_path.clone(), "valid detection"))?;
            detections.push(ImageDetection { image, detection });
        }
    }
    if !evaluated.contains(&true) {
        return Err(EvalError::NoPredictions);
    }
    let mut truths = Vec::new();
    for (image, r) in truth.records().iter().enumerate().filter(|(i, _)| evaluated[*i]) {
        let bbox = r.bbox.ok_or_else(|| EvalError::MissingField(r.image_path.clone(), "box"))?;
        let size = r.size.ok_or_else(|| EvalError::MissingField(r.image_path.clone(), "readable image"))?;
        let bbox = bbox.to_normalized(size.width as f64, size.height as f64).map_err(|_| EvalError::MissingField(r.image_path.clone(), "valid box"))?;
        truths.push(ImageTruth { image, class_id: r.class_id, bbox });
    }
    Ok((detections, truths))
}

/// Runs one metric and writes its report files into `out`. Returns the
/// JSON summary that was written.
pub fn evaluate_files(preds: &[PredictionLine], truth: &DatasetManifest, metric: Metric, iou_threshold: f64, out: &Path) -> Result<serde_json::Value, EvalError> {
    fs::create_dir_all(out)?;
    let summary = match metric {
        Metric::Accuracy | Metric::Confusion => {
            let m = classification_matrix(preds, truth)?;
            if metric == Metric::Confusion {
                write_confusion(&m, &out.join("confusion.csv"), &out.join("confusion.png"))?;
            }
            serde_json::json!({ "accuracy": accuracy(&m)?, "evaluated": m.total() })
        }
        Metric::Map => {
            let (dets, truths) = detection_inputs(preds, truth)?;
            let report = mean_average_precision(&dets, &truths, iou_threshold)?;
            let mut v = map_json(&report, iou_threshold);
            v["mean_localization_iou"] = serde_json::json!(mean_localization_iou(&dets, &truths));
            v
        }
    };
    let name = match metric {
        Metric::Accuracy => "accuracy.json",
        Metric::Confusion => "confusion.json",
        Metric::Map => "map.json",
    };
    write_atomic(&out.join(name), &serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Throughput over timed frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub warmup_frames: usize,
    pub timed_frames: usize,
    pub seconds: f64,
    pub fps: f64,
    pub hardware: String,
}

/// CPU model, logical cores, OS and architecture.
pub fn hardware_description() -> String {
    let model = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_string()))
        .unwrap_or_else(|| "unknown CPU".into());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{model}, {cores} logical cores, {} {}, CPU inference", std::env::consts::OS, std::env::consts::ARCH)
}

/// Feeds frames to `run` for `duration` of wall-clock time after `warmup`
/// untimed frames. Stops early when the stream ends.
pub fn fps_benchmark<T>(frames: impl IntoIterator<Item = T>, warmup: usize, duration: Duration, mut run: impl FnMut(&T)) -> Result<FpsReport, EvalError> {
    let mut frames = frames.into_iter();
    let mut warmed = 0;
    while warmed < warmup {
        let Some(f) = frames.next() else { break };
        run(&f);
        warmed += 1;
    }
    let start = Instant::now();
    let mut timed = 0;
    while start.elapsed() < duration {
        let Some(f) = frames.next() else { break };
        run(&f);
        timed += 1;
    }
    let seconds = start.elapsed().as_secs_f64();
    if timed == 0 {
        return Err(EvalError::EmptyStream);
    }
    Ok(FpsReport { warmup_frames: warmed, timed_frames: timed, seconds, fps: timed as f64 / seconds, hardware: hardware_description() })
}

/// Appends a report as one JSON line.
pub fn append_json_line(path: &Path, value: &impl Serialize) -> Result<(), EvalError> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}
