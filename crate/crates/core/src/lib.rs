//! Core algorithms for vehicle make-model recognition.
//!
//! Everything in this crate is pure computation over in-memory values and
//! only needs `alloc`: the class taxonomy, bounding-box geometry, SSD default
//! boxes and ground-truth matching, the detector and classifier losses,
//! non-maximum suppression, evaluation metrics, dataset splitting, the
//! semi-automatic annotation state machine and the plate-fraud rules.
//!
//! File formats, image decoding, networks and services live in the `vmmc-nn`
//! and `vmmc` crates.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod anchors;
pub mod annotation;
pub mod dataset;
pub mod fraud;
pub mod geometry;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod nms;
pub mod scores;
pub mod split;
pub mod taxonomy;

mod math;

pub use anchors::{generate_anchors, AnchorLayer, AnchorPlan, AnchorSet};
pub use geometry::{BoundingBox, Coords, GeometryError};
pub use nms::{nms, Detection};
pub use scores::ClassScores;
pub use taxonomy::{ClassId, ClassLabel, CLASS_LABELS, NUM_CLASSES};
