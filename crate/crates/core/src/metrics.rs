//! Classification and detection metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::nms::Detection;
use crate::taxonomy::{ClassId, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("truth and prediction lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label {0} is outside the label space")]
    LabelOutOfRange(usize),
    #[error("no samples were evaluated")]
    Empty,
    #[error("no class has ground truth")]
    NoGroundTruth,
}

/// Square count matrix; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<(), MetricsError> {
        for l in [truth, predicted] {
            if l >= self.classes {
                return Err(MetricsError::LabelOutOfRange(l));
            }
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    /// Per-class recall (diagonal over row sum); `None` for empty rows.
    pub fn recall_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|t| {
                let n: u64 = self.row(t).iter().sum();
                (n > 0).then(|| self.get(t, t) as f64 / n as f64)
            })
            .collect()
    }
}

/// Builds the 7-class confusion matrix of `predictions` against `truths`.
pub fn confusion_matrix(truths: &[ClassId], predictions: &[ClassId]) -> Result<ConfusionMatrix, MetricsError> {
    let t: Vec<usize> = truths.iter().map(|c| c.index()).collect();
    let p: Vec<usize> = predictions.iter().map(|c| c.index()).collect();
    confusion_matrix_n(&t, &p, NUM_CLASSES)
}

/// Confusion matrix over an arbitrary label space `0..classes`.
pub fn confusion_matrix_n(truths: &[usize], predictions: &[usize], classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if truths.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch(truths.len(), predictions.len()));
    }
    let mut m = ConfusionMatrix::new(classes);
    for (&t, &p) in truths.iter().zip(predictions) {
        m.record(t, p)?;
    }
    Ok(m)
}

/// Trace over total.
pub fn accuracy(matrix: &ConfusionMatrix) -> Result<f64, MetricsError> {
    match matrix.total() {
        0 => Err(MetricsError::Empty),
        n => Ok(matrix.trace() as f64 / n as f64),
    }
}

/// Ranked precision-recall points of one class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrecisionRecallCurve {
    /// `(recall, precision)` after each ranked detection.
    pub points: Vec<(f64, f64)>,
}

impl PrecisionRecallCurve {
    /// Area under the monotone precision envelope (all-points interpolation).
    pub fn average_precision(&self) -> f64 {
        let mut envelope: Vec<(f64, f64)> = self.points.clone();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for (r, p) in envelope {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
        ap
    }
}

/// A detection attributed to an evaluated image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageDetection {
    pub image: usize,
    pub detection: Detection,
}

/// A ground-truth box attributed to an evaluated image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageTruth {
    pub image: usize,
    pub class_id: ClassId,
    pub bbox: crate::geometry::BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    /// Average precision per class; `None` when the class has no ground truth.
    pub per_class: Vec<Option<f64>>,
    pub curves: Vec<PrecisionRecallCurve>,
    /// Mean over classes with a defined AP.
    pub map: f64,
}

/// Per-class average precision and their mean.
///
/// Detections of a class are ranked by probability (input order breaks
/// ties). A detection is a true positive when its best IoU among the still
/// unmatched ground truths of the same image and class reaches
/// `iou_threshold`; that ground truth is then consumed.
pub fn mean_average_precision(detections: &[ImageDetection], truths: &[ImageTruth], iou_threshold: f64) -> Result<MapReport, MetricsError> {
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    let mut curves = Vec::with_capacity(NUM_CLASSES);
    for class in ClassId::all() {
        let gts: Vec<&ImageTruth> = truths.iter().filter(|t| t.class_id == class).collect();
        let mut dets: Vec<(usize, &ImageDetection)> =
            detections.iter().enumerate().filter(|(_, d)| d.detection.class_id == class).collect();
        dets.sort_by(|a, b| b.1.detection.prob.total_cmp(&a.1.detection.prob).then(a.0.cmp(&b.0)));

        let mut used = vec![false; gts.len()];
        let mut tp = 0usize;
        let mut points = Vec::with_capacity(dets.len());
        for (rank, (_, d)) in dets.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.image != d.image {
                    continue;
                }
                let iou = gt.bbox.iou_unchecked(&d.detection.bbox);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, iou)) = best {
                if iou >= iou_threshold {
                    used[g] = true;
                    tp += 1;
                }
            }
            if !gts.is_empty() {
                points.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
            }
        }
        let curve = PrecisionRecallCurve { points };
        per_class.push((!gts.is_empty()).then(|| curve.average_precision()));
        curves.push(curve);
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    let map = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MapReport { per_class, curves, map })
}
