//! SSD default boxes.
//!
//! Each feature-map layer places `boxes_per_cell` boxes at the center of
//! every grid cell: a square box of the layer scale, a square box of the
//! geometric mean of this and the next scale, and one box for each extra
//! aspect ratio `r` and its reciprocal. The flattened order is layer, row,
//! column, box; detector heads emit predictions in the same order.

use alloc::vec::Vec;

use crate::geometry::{BoundingBox, Coords};
use crate::math::sqrt;

/// One feature map of the anchor plan.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLayer {
    /// Cells per side of the square feature map.
    pub grid: usize,
    /// Box scale of this layer, as a fraction of the input side.
    pub scale: f64,
    /// Scale of the next layer; the second square box uses `sqrt(scale * next_scale)`.
    pub next_scale: f64,
    /// Aspect ratios beyond 1. Each adds a `r` and a `1/r` box.
    pub aspect_ratios: Vec<f64>,
}

impl AnchorLayer {
    pub fn boxes_per_cell(&self) -> usize {
        2 + 2 * self.aspect_ratios.len()
    }

    pub fn box_count(&self) -> usize {
        self.grid * self.grid * self.boxes_per_cell()
    }

    /// `(width, height)` of every box of one cell, in emission order.
    pub fn cell_shapes(&self) -> Vec<(f64, f64)> {
        let mut shapes = Vec::with_capacity(self.boxes_per_cell());
        shapes.push((self.scale, self.scale));
        let mid = sqrt(self.scale * self.next_scale);
        shapes.push((mid, mid));
        for &r in &self.aspect_ratios {
            let s = sqrt(r);
            shapes.push((self.scale * s, self.scale / s));
            shapes.push((self.scale / s, self.scale * s));
        }
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPlan {
    pub layers: Vec<AnchorLayer>,
}

impl AnchorPlan {
    /// The canonical plan for a 300×300 input: grids 38, 19, 10, 5, 3, 1 with
    /// 4, 6, 6, 6, 4, 4 boxes per cell.
    pub fn ssd300() -> Self {
        Self::standard(&[38, 19, 10, 5, 3, 1])
    }

    /// Plan for arbitrary grid sizes using the ssd300 scale schedule: the
    /// first layer at 0.1, the rest spread evenly over 0.2..=0.88. Ratio
    /// sets follow ssd300 as well: `{2}` on the first and the last two
    /// layers, `{2, 3}` elsewhere.
    pub fn standard(grids: &[usize]) -> Self {
        let n = grids.len();
        let mut scales = Vec::with_capacity(n + 1);
        match n {
            0 => {}
            1 => scales.extend_from_slice(&[0.2, 0.88]),
            _ => {
                scales.push(0.1);
                let rest = n - 1;
                let step = if rest > 1 { (0.88 - 0.2) / (rest - 1) as f64 } else { 0.68 };
                for k in 0..=rest {
                    scales.push(0.2 + step * k as f64);
                }
            }
        }
        let layers = grids
            .iter()
            .enumerate()
            .map(|(k, &grid)| {
                let wide = k > 0 && k + 2 < n;
                AnchorLayer {
                    grid,
                    scale: scales[k],
                    next_scale: scales[k + 1],
                    aspect_ratios: if wide { alloc::vec![2.0, 3.0] } else { alloc::vec![2.0] },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn box_count(&self) -> usize {
        self.layers.iter().map(AnchorLayer::box_count).sum()
    }
}

/// Flattened default boxes with per-layer offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub plan: AnchorPlan,
    /// Index of each layer's first box in `boxes`.
    pub offsets: Vec<usize>,
    /// Normalized boxes, clipped to the unit square.
    pub boxes: Vec<BoundingBox>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Generates the flattened, clipped default boxes of `plan`.
pub fn generate_anchors(plan: &AnchorPlan) -> AnchorSet {
    let mut boxes = Vec::with_capacity(plan.box_count());
    let mut offsets = Vec::with_capacity(plan.layers.len());
    for layer in &plan.layers {
        offsets.push(boxes.len());
        let shapes = layer.cell_shapes();
        let g = layer.grid as f64;
        for row in 0..layer.grid {
            let cy = (row as f64 + 0.5) / g;
            for col in 0..layer.grid {
                let cx = (col as f64 + 0.5) / g;
                for &(w, h) in &shapes {
                    let x0 = (cx - w / 2.0).max(0.0);
                    let y0 = (cy - h / 2.0).max(0.0);
                    let x1 = (cx + w / 2.0).min(1.0);
                    let y1 = (cy + h / 2.0).min(1.0);
                    // centers are strictly inside the unit square, so clipping keeps area
                    boxes.push(BoundingBox::new(x0, y0, x1, y1, Coords::Normalized).expect("anchor keeps positive extent"));
                }
            }
        }
    }
    AnchorSet { plan: plan.clone(), offsets, boxes }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ssd300_yields_8732_boxes() {
        // 38²·4 + 19²·6 + 10²·6 + 5²·6 + 3²·4 + 1²·4
        let expected = 38 * 38 * 4 + 19 * 19 * 6 + 10 * 10 * 6 + 5 * 5 * 6 + 3 * 3 * 4 + 4;
        assert_eq!(expected, 8732);
        let plan = AnchorPlan::ssd300();
        let per_cell: Vec<usize> = plan.layers.iter().map(AnchorLayer::boxes_per_cell).collect();
        assert_eq!(per_cell, [4, 6, 6, 6, 4, 4]);
        assert_eq!(generate_anchors(&plan).len(), 8732);
    }

    #[test]
    fn ssd300_scales_match_reference_sizes() {
        // min sizes 30, 60, 111, 162, 213, 264 on a 300 px input
        let plan = AnchorPlan::ssd300();
        let px: Vec<f64> = plan.layers.iter().map(|l| l.scale * 300.0).collect();
        for (got, want) in px.iter().zip([30.0, 60.0, 111.0, 162.0, 213.0, 264.0]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn single_layer_plan() {
        let plan = AnchorPlan {
            layers: alloc::vec![AnchorLayer { grid: 1, scale: 0.5, next_scale: 0.7, aspect_ratios: alloc::vec![2.0] }],
        };
        let set = generate_anchors(&plan);
        assert_eq!(set.len(), 4);
        assert_eq!(set.offsets, [0]);
    }

    #[test]
    fn anchors_stay_inside_unit_square() {
        let set = generate_anchors(&AnchorPlan::ssd300());
        for b in &set.boxes {
            assert_eq!(b.coords(), Coords::Normalized);
            assert!(b.lies_within(1.0, 1.0));
            assert!(b.area() > 0.0);
        }
    }

    #[test]
    fn offsets_partition_the_box_list() {
        let set = generate_anchors(&AnchorPlan::ssd300());
        assert_eq!(set.offsets, [0, 5776, 7942, 8542, 8692, 8728]);
    }
}
