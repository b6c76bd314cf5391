//! Losses and their analytic gradients.
//!
//! The detector objective is softmax cross entropy over classes (with hard
//! negative mining of background boxes) plus Smooth L1 on the box offsets
//! of positive boxes, normalized by the number of positives. The classifier
//! objective is categorical cross entropy.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::BoundingBox;
use crate::math::{abs, exp, floor, ln};
use crate::matching::{encode, Assignment, GroundTruth, DEFAULT_VARIANCES};

/// Smooth L1: `x²/2` for `|x| < 1`, else `|x| - 1/2`.
pub fn smooth_l1(x: f64) -> f64 {
    let a = abs(x);
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Derivative of [`smooth_l1`].
pub fn smooth_l1_grad(x: f64) -> f64 {
    if abs(x) < 1.0 {
        x
    } else if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `ln Σ exp(x)` computed with the max shift.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + ln(logits.iter().map(|&x| exp(x - m)).sum::<f64>())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&x| exp(x - lse)).collect()
}

/// Cross entropy of `logits` against class `target`, with the gradient
/// `softmax(logits) - onehot(target)`.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let mut grad: Vec<f64> = logits.iter().map(|&x| exp(x - lse)).collect();
    grad[target] -= 1.0;
    (lse - logits[target], grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorLossConfig {
    /// IoU at which a default box becomes positive.
    pub match_threshold: f64,
    /// Mined negatives per positive.
    pub neg_pos_ratio: f64,
    /// Weight of the localization term.
    pub loc_weight: f64,
    pub variances: [f64; 2],
}

impl Default for DetectorLossConfig {
    fn default() -> Self {
        Self { match_threshold: 0.5, neg_pos_ratio: 3.0, loc_weight: 1.0, variances: DEFAULT_VARIANCES }
    }
}

impl DetectorLossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.match_threshold > 0.0 && self.match_threshold < 1.0) {
            return Err(LossError::BadConfig("match_threshold must lie in (0, 1)"));
        }
        if !(self.neg_pos_ratio >= 1.0) {
            return Err(LossError::BadConfig("neg_pos_ratio must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("no positive and no negative boxes were selected")]
    NoSamples,
    #[error("prediction and target lengths disagree")]
    ShapeMismatch,
    #[error("invalid loss config: {0}")]
    BadConfig(&'static str),
}

/// Training target of one default box: class index (0 is background) and
/// encoded offsets for positives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub class_index: usize,
    pub offsets: [f64; 4],
}

/// Turns matcher output into per-anchor targets. Object classes are shifted
/// by one so that index 0 stands for background.
pub fn build_targets(assignments: &[Assignment], anchors: &[BoundingBox], gts: &[GroundTruth], variances: [f64; 2]) -> Vec<Option<AnchorTarget>> {
    assignments
        .iter()
        .zip(anchors)
        .map(|(a, anchor)| match *a {
            Assignment::Background => None,
            Assignment::Object { gt_index, class_id, .. } => Some(AnchorTarget {
                class_index: class_id.index() + 1,
                offsets: encode(&gts[gt_index].bbox, anchor, variances),
            }),
        })
        .collect()
}

/// Loss value with gradients w.r.t. the raw predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct SsdLoss {
    pub total: f64,
    pub confidence: f64,
    pub localization: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Same layout as the `loc` input: `anchors × 4`.
    pub grad_loc: Vec<f32>,
    /// Same layout as the `conf` input: `anchors × classes`.
    pub grad_conf: Vec<f32>,
}

/// Detector loss for one image.
///
/// `loc` holds `4` offsets per anchor and `conf` holds `classes` logits per
/// anchor with background at index 0. Negatives are the non-positive anchors
/// with the highest background loss, `floor(ratio · positives)` of them;
/// ties go to the lower anchor index.
pub fn ssd_loss(loc: &[f32], conf: &[f32], targets: &[Option<AnchorTarget>], classes: usize, cfg: &DetectorLossConfig) -> Result<SsdLoss, LossError> {
    cfg.validate()?;
    let n = targets.len();
    if loc.len() != n * 4 || conf.len() != n * classes || classes < 2 {
        return Err(LossError::ShapeMismatch);
    }

    let mut lse = Vec::with_capacity(n);
    let mut row = vec![0.0f64; classes];
    for a in 0..n {
        for (r, &c) in row.iter_mut().zip(&conf[a * classes..(a + 1) * classes]) {
            *r = c as f64;
        }
        lse.push(log_sum_exp(&row));
    }

    let positives = targets.iter().filter(|t| t.is_some()).count();
    let mut negatives: Vec<(usize, f64)> = targets
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_none())
        .map(|(a, _)| (a, lse[a] - conf[a * classes] as f64))
        .collect();
    let wanted = floor(cfg.neg_pos_ratio * positives as f64) as usize;
    let keep = wanted.min(negatives.len());
    negatives.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    negatives.truncate(keep);
    if positives == 0 && negatives.is_empty() {
        return Err(LossError::NoSamples);
    }

    let norm = positives.max(1) as f64;
    let mut grad_loc = vec![0.0f32; loc.len()];
    let mut grad_conf = vec![0.0f32; conf.len()];
    let mut conf_loss = 0.0;
    let mut loc_loss = 0.0;

    let add_conf = |a: usize, class_index: usize, grad_conf: &mut [f32]| -> f64 {
        let base = a * classes;
        for k in 0..classes {
            let p = exp(conf[base + k] as f64 - lse[a]);
            let g = if k == class_index { p - 1.0 } else { p };
            grad_conf[base + k] += (g / norm) as f32;
        }
        lse[a] - conf[base + class_index] as f64
    };

    for (a, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            conf_loss += add_conf(a, t.class_index, &mut grad_conf);
            for j in 0..4 {
                let d = loc[a * 4 + j] as f64 - t.offsets[j];
                loc_loss += smooth_l1(d);
                grad_loc[a * 4 + j] = (cfg.loc_weight * smooth_l1_grad(d) / norm) as f32;
            }
        }
    }
    for &(a, _) in &negatives {
        conf_loss += add_conf(a, 0, &mut grad_conf);
    }

    let confidence = conf_loss / norm;
    let localization = loc_loss / norm;
    Ok(SsdLoss {
        total: confidence + cfg.loc_weight * localization,
        confidence,
        localization,
        positives,
        negatives: negatives.len(),
        grad_loc,
        grad_conf,
    })
}
