//! Ground-truth to default-box matching and box offset encoding.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{BoundingBox, Coords};
use crate::math::{exp, ln};
use crate::taxonomy::ClassId;

/// Scaling applied to center and size offsets when encoding regressions.
pub const DEFAULT_VARIANCES: [f64; 2] = [0.1, 0.2];

/// A ground-truth object in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub class_id: ClassId,
}

/// What a default box is asked to predict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Assignment {
    Background,
    Object { gt_index: usize, class_id: ClassId, iou: f64 },
}

impl Assignment {
    pub fn is_positive(&self) -> bool {
        matches!(self, Assignment::Object { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum MatchError {
    #[error("anchor set is empty")]
    NoAnchors,
    #[error("ground truth {0} is not in normalized coordinates")]
    NotNormalized(usize),
    #[error("matching threshold {0} is outside (0, 1)")]
    BadThreshold(f64),
}

/// Assigns every anchor to a ground truth or to background.
///
/// Each ground truth is first matched to its best-IoU anchor regardless of
/// the threshold; then every remaining anchor whose best IoU reaches
/// `threshold` takes that ground truth. When two ground truths share the same
/// best anchor, the later one takes its best still-free anchor instead, so
/// every ground truth ends with at least one positive.
pub fn match_anchors(anchors: &[BoundingBox], gts: &[GroundTruth], threshold: f64) -> Result<Vec<Assignment>, MatchError> {
    if anchors.is_empty() {
        return Err(MatchError::NoAnchors);
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MatchError::BadThreshold(threshold));
    }
    if let Some(i) = gts.iter().position(|g| g.bbox.coords() != Coords::Normalized) {
        return Err(MatchError::NotNormalized(i));
    }

    let mut out = vec![Assignment::Background; anchors.len()];
    if gts.is_empty() {
        return Ok(out);
    }

    let ious: Vec<Vec<f64>> = gts.iter().map(|g| anchors.iter().map(|a| a.iou_unchecked(&g.bbox)).collect()).collect();

    for (a, slot) in out.iter_mut().enumerate() {
        let mut best = (0usize, -1.0f64);
        for (g, row) in ious.iter().enumerate() {
            if row[a] > best.1 {
                best = (g, row[a]);
            }
        }
        if best.1 >= threshold {
            *slot = Assignment::Object { gt_index: best.0, class_id: gts[best.0].class_id, iou: best.1 };
        }
    }

    let mut forced = vec![false; anchors.len()];
    for (g, row) in ious.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (a, &v) in row.iter().enumerate() {
            if forced[a] {
                continue;
            }
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((a, v));
            }
        }
        if let Some((a, v)) = best {
            forced[a] = true;
            out[a] = Assignment::Object { gt_index: g, class_id: gts[g].class_id, iou: v };
        }
    }
    Ok(out)
}

/// Encodes `gt` relative to `anchor` as center/size offsets.
pub fn encode(gt: &BoundingBox, anchor: &BoundingBox, variances: [f64; 2]) -> [f64; 4] {
    let (gcx, gcy) = gt.center();
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gcx - acx) / aw / variances[0],
        (gcy - acy) / ah / variances[0],
        ln(gt.width() / aw) / variances[1],
        ln(gt.height() / ah) / variances[1],
    ]
}

/// Inverse of [`encode`]. Returns `None` for non-finite or degenerate output.
pub fn decode(offsets: [f64; 4], anchor: &BoundingBox, variances: [f64; 2]) -> Option<BoundingBox> {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + offsets[0] * variances[0] * aw;
    let cy = acy + offsets[1] * variances[0] * ah;
    let w = aw * exp(offsets[2] * variances[1]);
    let h = ah * exp(offsets[3] * variances[1]);
    BoundingBox::from_center(cx, cy, w, h, anchor.coords()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nb(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::normalized(a, b, c, d).unwrap()
    }

    fn gt(b: BoundingBox, c: u8) -> GroundTruth {
        GroundTruth { bbox: b, class_id: ClassId::new(c).unwrap() }
    }

    /// Ten anchors tiling [0,1]×[0,0.1] in vertical strips of width 0.1.
    fn strip_anchors() -> Vec<BoundingBox> {
        (0..10).map(|i| nb(i as f64 * 0.1, 0.0, (i + 1) as f64 * 0.1, 0.1)).collect()
    }

    #[test]
    fn exact_anchor_match_is_positive_with_iou_one() {
        let anchors = strip_anchors();
        let out = match_anchors(&anchors, &[gt(anchors[3], 2)], 0.5).unwrap();
        assert_eq!(out[3], Assignment::Object { gt_index: 0, class_id: ClassId::new(2).unwrap(), iou: 1.0 });
        assert_eq!(out.iter().filter(|a| a.is_positive()).count(), 1);
    }

    #[test]
    fn weak_ground_truth_still_gets_forced_match() {
        // gt covers 0.3 of one strip (iou 0.3 against strip 4) and nothing
        // else, found by scanning all ten anchors
        let anchors = strip_anchors();
        let g = nb(0.42, 0.0, 0.45, 0.1);
        let scan: Vec<f64> = anchors.iter().map(|a| a.iou(&g).unwrap()).collect();
        let best = scan.iter().cloned().fold(0.0, f64::max);
        assert!((best - 0.3).abs() < 1e-12);
        let out = match_anchors(&anchors, &[gt(g, 1)], 0.5).unwrap();
        let positives: Vec<usize> = out.iter().enumerate().filter(|(_, a)| a.is_positive()).map(|(i, _)| i).collect();
        assert_eq!(positives, [4]);
    }

    #[test]
    fn no_ground_truth_means_all_background() {
        let out = match_anchors(&strip_anchors(), &[], 0.5).unwrap();
        assert!(out.iter().all(|a| *a == Assignment::Background));
    }

    #[test]
    fn empty_anchor_set_is_an_error() {
        assert_eq!(match_anchors(&[], &[], 0.5), Err(MatchError::NoAnchors));
    }

    #[test]
    fn shared_best_anchor_still_leaves_each_gt_a_positive() {
        let anchors = strip_anchors();
        let a = gt(nb(0.0, 0.0, 0.1, 0.1), 0);
        let b = gt(nb(0.0, 0.0, 0.09, 0.1), 1);
        let out = match_anchors(&anchors, &[a, b], 0.5).unwrap();
        for g in 0..2 {
            assert!(out.iter().any(|x| matches!(x, Assignment::Object { gt_index, .. } if *gt_index == g)));
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let anchor = nb(0.2, 0.3, 0.5, 0.7);
        let g = nb(0.25, 0.2, 0.6, 0.65);
        let off = encode(&g, &anchor, DEFAULT_VARIANCES);
        let back = decode(off, &anchor, DEFAULT_VARIANCES).unwrap();
        for (x, y) in back.to_array().iter().zip(g.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(encode(&anchor, &anchor, DEFAULT_VARIANCES), [0.0; 4]);
    }
}
