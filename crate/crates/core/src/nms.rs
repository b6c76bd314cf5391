//! Greedy non-maximum suppression.

use alloc::vec::Vec;

use crate::geometry::BoundingBox;
use crate::taxonomy::ClassId;

/// A scored, classed box: `[prob, class, x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub prob: f64,
    pub class_id: ClassId,
    pub bbox: BoundingBox,
}

/// Ranking used by [`nms`]: probability descending, then input position
/// ascending. Detections decoded from a detector arrive in anchor order, so
/// ties resolve to the smaller anchor index.
pub fn rank_order(detections: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].prob.total_cmp(&detections[a].prob).then(a.cmp(&b)));
    order
}

/// Keeps the best detection, drops every lower-ranked detection of the same
/// class (any class when `per_class` is false) whose IoU with it exceeds
/// `iou_threshold`, and repeats. Output is sorted by probability descending.
pub fn nms(detections: &[Detection], iou_threshold: f64, per_class: bool) -> Vec<Detection> {
    let order = rank_order(detections);
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &detections[i];
        let suppressed = kept
            .iter()
            .any(|k| (!per_class || k.class_id == d.class_id) && k.bbox.iou_unchecked(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}
