//! Semi-automatic ground-truth annotation.
//!
//! Every image of a class folder goes through a car detector. The largest
//! confident car is accepted as the image's box and labeled with the folder's
//! class when it covers at least `certain_size` of the image; any other image
//! waits in a review queue until an annotator labels or deletes it. Folders
//! are processed in order with the class id advancing by one per folder.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::dataset::{ImageSize, Source};
use crate::geometry::{BoundingBox, Coords};
use crate::taxonomy::ClassId;

/// Category name the car detector reports for cars.
pub const CAR_CATEGORY: &str = "car";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotationConfig {
    /// Minimum car box area as a fraction of image area, in `(0, 1]`.
    pub certain_size: f64,
    /// Candidates below this confidence are ignored, in `[0, 1]`.
    pub confidence_threshold: f64,
    pub class_id: ClassId,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self { certain_size: 0.10, confidence_threshold: 0.5, class_id: ClassId::default() }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<(), AnnotationError> {
        if !(self.certain_size > 0.0 && self.certain_size <= 1.0) {
            return Err(AnnotationError::BadConfig("certain_size must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(AnnotationError::BadConfig("confidence_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A car proposed by the detector, in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionCandidate {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub detector_class: String,
}

/// What the detector saw in one image.
#[derive(Debug, Clone, PartialEq)]
pub enum Probe {
    Frame { size: ImageSize, candidates: Vec<DetectionCandidate> },
    /// The image could not be decoded.
    Unreadable,
}

/// Car detector used for auto-annotation. An `Err` aborts the run.
pub trait CarDetector {
    type Error;

    fn probe(&mut self, image_path: &str) -> Result<Probe, Self::Error>;
}

impl<F, E> CarDetector for F
where
    F: FnMut(&str) -> Result<Probe, E>,
{
    type Error = E;

    fn probe(&mut self, image_path: &str) -> Result<Probe, E> {
        self(image_path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRow {
    pub image_path: String,
    pub class_id: ClassId,
    /// Pixel-space box.
    pub bbox: BoundingBox,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReviewStatus {
    Pending,
    Labeled,
    Deleted,
}

impl ReviewStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ReviewStatus::Pending => "pending",
            ReviewStatus::Labeled => "labeled",
            ReviewStatus::Deleted => "deleted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pending" => Some(ReviewStatus::Pending),
            "labeled" => Some(ReviewStatus::Labeled),
            "deleted" => Some(ReviewStatus::Deleted),
            _ => None,
        }
    }
}

/// An image waiting for (or past) a human decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewItem {
    pub id: u64,
    pub image_path: String,
    /// Class implied by the folder the image came from.
    pub folder_class: ClassId,
    pub size: Option<ImageSize>,
    pub best_candidate: Option<DetectionCandidate>,
    pub status: ReviewStatus,
    pub assigned_class: Option<ClassId>,
}

/// An annotator's answer for a pending item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    /// Label with `class_id`; without a box the candidate's box is used.
    Label { class_id: ClassId, bbox: Option<BoundingBox> },
    Delete,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnnotationError {
    #[error("invalid annotation config: {0}")]
    BadConfig(&'static str),
    #[error("no review item with id {0}")]
    UnknownItem(u64),
    #[error("review item {id} is already {}", status.as_str())]
    NotPending { id: u64, status: ReviewStatus },
    #[error("review item {0} has no candidate box; the label must carry one")]
    MissingBox(u64),
    #[error("box for review item {0} must be in pixels and inside the image")]
    BadBox(u64),
    #[error("no auto-annotated row for {0:?}")]
    NoAutoRow(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CampaignError<E> {
    #[error("image {0:?} appears in more than one class folder")]
    Overlap(String),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("detector failed on {image:?}")]
    Detector { image: String, source: E },
}

/// Counts by review status plus accepted rows by source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReviewStats {
    pub pending: usize,
    pub labeled: usize,
    pub deleted: usize,
    pub auto_rows: usize,
    pub human_rows: usize,
}

/// Accepted annotation rows and the review queue.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationStore {
    rows: Vec<AnnotationRow>,
    queue: Vec<ReviewItem>,
    next_id: u64,
}

/// Picks the largest confident car; the earliest candidate wins area ties.
pub fn select_candidate<'a>(candidates: &'a [DetectionCandidate], cfg: &AnnotationConfig) -> Option<&'a DetectionCandidate> {
    let mut best: Option<&DetectionCandidate> = None;
    for c in candidates {
        if c.detector_class != CAR_CATEGORY || c.confidence < cfg.confidence_threshold {
            continue;
        }
        if best.is_none_or(|b| c.bbox.area() > b.bbox.area()) {
            best = Some(c);
        }
    }
    best
}

impl AnnotationStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a store from persisted rows and queue.
    pub fn from_parts(rows: Vec<AnnotationRow>, queue: Vec<ReviewItem>) -> Self {
        let next_id = queue.iter().map(|q| q.id + 1).max().unwrap_or(0);
        Self { rows, queue, next_id }
    }

    pub fn rows(&self) -> &[AnnotationRow] {
        &self.rows
    }

    pub fn queue(&self) -> &[ReviewItem] {
        &self.queue
    }

    pub fn item(&self, id: u64) -> Option<&ReviewItem> {
        self.queue.iter().find(|q| q.id == id)
    }

    /// Oldest pending item.
    pub fn next_pending(&self) -> Option<&ReviewItem> {
        self.queue.iter().find(|q| q.status == ReviewStatus::Pending)
    }

    pub fn stats(&self) -> ReviewStats {
        let mut s = ReviewStats::default();
        for q in &self.queue {
            match q.status {
                ReviewStatus::Pending => s.pending += 1,
                ReviewStatus::Labeled => s.labeled += 1,
                ReviewStatus::Deleted => s.deleted += 1,
            }
        }
        for r in &self.rows {
            match r.source {
                Source::Auto => s.auto_rows += 1,
                Source::Human => s.human_rows += 1,
            }
        }
        s
    }

    fn enqueue(&mut self, image_path: &str, folder_class: ClassId, size: Option<ImageSize>, best: Option<DetectionCandidate>) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.queue.push(ReviewItem {
            id,
            image_path: image_path.into(),
            folder_class,
            size,
            best_candidate: best,
            status: ReviewStatus::Pending,
            assigned_class: None,
        });
        id
    }

    /// Annotates one image from its probe result. Returns true for an auto row.
    pub fn ingest_probe(&mut self, image_path: &str, probe: Probe, cfg: &AnnotationConfig) -> bool {
        match probe {
            Probe::Unreadable => {
                self.enqueue(image_path, cfg.class_id, None, None);
                false
            }
            Probe::Frame { size, candidates } => {
                let image_area = size.width as f64 * size.height as f64;
                let best = select_candidate(&candidates, cfg).cloned();
                match best {
                    Some(c) if image_area > 0.0 && c.bbox.area() / image_area >= cfg.certain_size => {
                        self.rows.push(AnnotationRow { image_path: image_path.into(), class_id: cfg.class_id, bbox: c.bbox, source: Source::Auto });
                        true
                    }
                    best => {
                        self.enqueue(image_path, cfg.class_id, Some(size), best);
                        false
                    }
                }
            }
        }
    }

    /// Runs the detector over `images` and files each one as an auto row or
    /// a pending review item. On detector failure the images processed so
    /// far stay in the store.
    pub fn auto_annotate<D: CarDetector>(&mut self, images: &[String], detector: &mut D, cfg: &AnnotationConfig) -> Result<ReviewStats, CampaignError<D::Error>> {
        cfg.validate()?;
        let before = self.stats();
        for path in images {
            let probe = detector.probe(path).map_err(|source| CampaignError::Detector { image: path.clone(), source })?;
            self.ingest_probe(path, probe, cfg);
        }
        let after = self.stats();
        Ok(ReviewStats {
            pending: after.pending - before.pending,
            labeled: 0,
            deleted: 0,
            auto_rows: after.auto_rows - before.auto_rows,
            human_rows: 0,
        })
    }

    /// Applies an annotator decision to a pending item.
    pub fn apply_decision(&mut self, id: u64, decision: Decision) -> Result<&ReviewItem, AnnotationError> {
        let pos = self.queue.iter().position(|q| q.id == id).ok_or(AnnotationError::UnknownItem(id))?;
        let item = &self.queue[pos];
        if item.status != ReviewStatus::Pending {
            return Err(AnnotationError::NotPending { id, status: item.status });
        }
        match decision {
            Decision::Delete => {
                self.queue[pos].status = ReviewStatus::Deleted;
            }
            Decision::Label { class_id, bbox } => {
                let bbox = match bbox.or_else(|| item.best_candidate.as_ref().map(|c| c.bbox)) {
                    Some(b) => b,
                    None => return Err(AnnotationError::MissingBox(id)),
                };
                let fits = item.size.is_none_or(|s| bbox.lies_within(s.width as f64, s.height as f64));
                if bbox.coords() != Coords::Pixel || !fits {
                    return Err(AnnotationError::BadBox(id));
                }
                self.rows.push(AnnotationRow { image_path: item.image_path.clone(), class_id, bbox, source: Source::Human });
                let item = &mut self.queue[pos];
                item.status = ReviewStatus::Labeled;
                item.assigned_class = Some(class_id);
            }
        }
        Ok(&self.queue[pos])
    }

    /// Sends an auto-annotated image back to review, dropping its row.
    pub fn reopen(&mut self, image_path: &str) -> Result<u64, AnnotationError> {
        let pos = self
            .rows
            .iter()
            .position(|r| r.image_path == image_path && r.source == Source::Auto)
            .ok_or_else(|| AnnotationError::NoAutoRow(image_path.into()))?;
        let row = self.rows.remove(pos);
        let candidate = DetectionCandidate { bbox: row.bbox, confidence: 1.0, detector_class: CAR_CATEGORY.into() };
        Ok(self.enqueue(&row.image_path, row.class_id, None, Some(candidate)))
    }
}

/// Annotates class folders in order. `classes[k]` holds the images of one
/// folder and the class id it stands for.
pub fn run_campaign<D: CarDetector>(classes: &[(Vec<String>, ClassId)], detector: &mut D, cfg: &AnnotationConfig) -> Result<AnnotationStore, CampaignError<D::Error>> {
    let mut seen = BTreeSet::new();
    for (images, _) in classes {
        for p in images {
            if !seen.insert(p.as_str()) {
                return Err(CampaignError::Overlap(p.clone()));
            }
        }
    }
    let mut store = AnnotationStore::new();
    for (images, class_id) in classes {
        let cfg = AnnotationConfig { class_id: *class_id, ..*cfg };
        store.auto_annotate(images, detector, &cfg)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    const SIZE: ImageSize = ImageSize { width: 100, height: 100 };

    fn car(x0: f64, y0: f64, x1: f64, y1: f64) -> DetectionCandidate {
        DetectionCandidate { bbox: BoundingBox::pixel(x0, y0, x1, y1).unwrap(), confidence: 0.9, detector_class: CAR_CATEGORY.into() }
    }

    fn frame(c: Vec<DetectionCandidate>) -> Probe {
        Probe::Frame { size: SIZE, candidates: c }
    }

    fn cfg(certain: f64, class: u8) -> AnnotationConfig {
        AnnotationConfig { certain_size: certain, confidence_threshold: 0.5, class_id: ClassId::new(class).unwrap() }
    }

    fn paths(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}/{i}.jpg")).collect()
    }

    #[test]
    fn half_frame_car_is_auto_annotated() {
        let mut store = AnnotationStore::new();
        let mut det = |_: &str| Ok::<_, ()>(frame(vec![car(0.0, 0.0, 100.0, 50.0)]));
        store.auto_annotate(&paths("a", 1), &mut det, &cfg(0.1, 3)).unwrap();
        assert_eq!(store.rows().len(), 1);
        assert_eq!(store.rows()[0].class_id.get(), 3);
        assert_eq!(store.rows()[0].source, Source::Auto);
        assert!(store.queue().is_empty());
    }

    #[test]
    fn no_cars_goes_to_review() {
        let mut store = AnnotationStore::new();
        let mut det = |_: &str| Ok::<_, ()>(frame(vec![]));
        store.auto_annotate(&paths("a", 1), &mut det, &cfg(0.1, 0)).unwrap();
        assert!(store.rows().is_empty());
        assert_eq!(store.queue()[0].status, ReviewStatus::Pending);
        assert!(store.queue()[0].best_candidate.is_none());
    }

    #[test]
    fn largest_candidate_wins() {
        // areas 0.04 and 0.2 of the image
        let small = car(0.0, 0.0, 20.0, 20.0);
        let big = car(50.0, 50.0, 90.0, 100.0);
        let mut store = AnnotationStore::new();
        let mut det = |_: &str| Ok::<_, ()>(frame(vec![small.clone(), big.clone()]));
        store.auto_annotate(&paths("a", 1), &mut det, &cfg(0.1, 0)).unwrap();
        assert_eq!(store.rows()[0].bbox, big.bbox);
    }

    #[test]
    fn low_confidence_and_non_car_candidates_are_ignored() {
        let mut weak = car(0.0, 0.0, 100.0, 100.0);
        weak.confidence = 0.2;
        let mut truck = car(0.0, 0.0, 100.0, 100.0);
        truck.detector_class = "truck".into();
        let small = car(0.0, 0.0, 10.0, 10.0);
        let candidates = [weak, truck, small.clone()];
        let c = select_candidate(&candidates, &cfg(0.1, 0)).unwrap();
        assert_eq!(*c, small);
    }

    #[test]
    fn unreadable_image_is_queued_without_candidate() {
        let mut store = AnnotationStore::new();
        let mut det = |_: &str| Ok::<_, ()>(Probe::Unreadable);
        store.auto_annotate(&paths("a", 2), &mut det, &cfg(0.1, 0)).unwrap();
        assert_eq!(store.stats().pending, 2);
    }

    #[test]
    fn detector_failure_keeps_partial_results() {
        let mut store = AnnotationStore::new();
        let mut calls = 0;
        let mut det = |_: &str| {
            calls += 1;
            if calls == 3 {
                Err("gpu fell over")
            } else {
                Ok(frame(vec![car(0.0, 0.0, 100.0, 100.0)]))
            }
        };
        let err = store.auto_annotate(&paths("a", 5), &mut det, &cfg(0.1, 0)).unwrap_err();
        assert!(matches!(err, CampaignError::Detector { ref image, .. } if image == "a/2.jpg"));
        assert_eq!(store.rows().len(), 2);
    }

    #[test]
    fn decisions_follow_the_state_machine() {
        let mut store = AnnotationStore::new();
        let mut det = |_: &str| Ok::<_, ()>(frame(vec![car(0.0, 0.0, 5.0, 5.0)]));
        store.auto_annotate(&paths("a", 2), &mut det, &cfg(0.1, 0)).unwrap();
        let three = ClassId::new(3).unwrap();
        let drawn = BoundingBox::pixel(10.0, 10.0, 60.0, 40.0).unwrap();

        let item = store.apply_decision(0, Decision::Label { class_id: three, bbox: Some(drawn) }).unwrap();
        assert_eq!(item.status, ReviewStatus::Labeled);
        assert_eq!(item.assigned_class, Some(three));
        assert_eq!(store.rows().len(), 1);
        assert_eq!(store.rows()[0].source, Source::Human);
        assert_eq!(store.rows()[0].class_id, three);

        assert_eq!(store.apply_decision(1, Decision::Delete).unwrap().status, ReviewStatus::Deleted);
        assert_eq!(store.rows().len(), 1);

        // every second decision is rejected and leaves the store untouched
        for id in [0, 1] {
            for d in [Decision::Delete, Decision::Label { class_id: three, bbox: Some(drawn) }] {
                let before = store.clone();
                assert!(matches!(store.apply_decision(id, d), Err(AnnotationError::NotPending { .. })));
                assert_eq!(store, before);
            }
        }
        assert_eq!(store.apply_decision(9, Decision::Delete), Err(AnnotationError::UnknownItem(9)));
    }

    #[test]
    fn label_without_any_box_is_rejected() {
        let mut store = AnnotationStore::new();
        let mut det = |_: &str| Ok::<_, ()>(frame(vec![]));
        store.auto_annotate(&paths("a", 1), &mut det, &cfg(0.1, 0)).unwrap();
        let r = store.apply_decision(0, Decision::Label { class_id: ClassId::new(1).unwrap(), bbox: None });
        assert_eq!(r, Err(AnnotationError::MissingBox(0)));
        let outside = BoundingBox::pixel(0.0, 0.0, 101.0, 50.0).unwrap();
        let r = store.apply_decision(0, Decision::Label { class_id: ClassId::new(1).unwrap(), bbox: Some(outside) });
        assert_eq!(r, Err(AnnotationError::BadBox(0)));
        assert_eq!(store.stats().pending, 1);
    }

    #[test]
    fn campaign_advances_class_ids_per_folder() {
        let folders: Vec<(Vec<String>, ClassId)> = (0..2).map(|k| (paths(&format!("f{k}"), 3), ClassId::new(k).unwrap())).collect();
        let mut det = |_: &str| Ok::<_, ()>(frame(vec![car(0.0, 0.0, 80.0, 80.0)]));
        let store = run_campaign(&folders, &mut det, &cfg(0.1, 0)).unwrap();
        assert_eq!(store.rows().len(), 6);
        let ids: BTreeSet<u8> = store.rows().iter().map(|r| r.class_id.get()).collect();
        assert_eq!(ids.into_iter().collect::<Vec<_>>(), [0, 1]);
    }

    #[test]
    fn campaign_below_threshold_queues_everything() {
        let folders = vec![(paths("f", 3), ClassId::new(0).unwrap())];
        let mut det = |_: &str| Ok::<_, ()>(frame(vec![car(0.0, 0.0, 10.0, 10.0)]));
        let store = run_campaign(&folders, &mut det, &cfg(0.1, 0)).unwrap();
        assert_eq!(store.rows().len(), 0);
        assert_eq!(store.queue().len(), 3);
    }

    #[test]
    fn campaign_rejects_overlapping_folders() {
        let folders = vec![(paths("f", 2), ClassId::new(0).unwrap()), (paths("f", 1), ClassId::new(1).unwrap())];
        let mut det = |_: &str| Ok::<_, ()>(frame(vec![]));
        assert!(matches!(run_campaign(&folders, &mut det, &cfg(0.1, 0)), Err(CampaignError::Overlap(_))));
    }

    #[test]
    fn reopen_moves_auto_row_back_to_review() {
        let mut store = AnnotationStore::new();
        let mut det = |_: &str| Ok::<_, ()>(frame(vec![car(0.0, 0.0, 80.0, 80.0)]));
        store.auto_annotate(&paths("a", 1), &mut det, &cfg(0.1, 2)).unwrap();
        let id = store.reopen("a/0.jpg").unwrap();
        assert!(store.rows().is_empty());
        store.apply_decision(id, Decision::Label { class_id: ClassId::new(4).unwrap(), bbox: None }).unwrap();
        assert_eq!(store.rows()[0].class_id.get(), 4);
        assert_eq!(store.rows()[0].source, Source::Human);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn fraction_detector(fracs: Vec<f64>) -> impl FnMut(&str) -> Result<Probe, ()> {
            move |p: &str| {
                let i: usize = p.trim_start_matches("img/").trim_end_matches(".jpg").parse().unwrap();
                let side = 100.0 * libm::sqrt(fracs[i]);
                Ok(frame(vec![car(0.0, 0.0, side.max(0.01), side.max(0.01))]))
            }
        }

        proptest! {
            #[test]
            fn images_partition_by_area(fracs in proptest::collection::vec(0.001f64..1.0, 1..40), certain in 0.01f64..1.0) {
                let images = paths("img", fracs.len());
                let mut store = AnnotationStore::new();
                store.auto_annotate(&images, &mut fraction_detector(fracs.clone()), &cfg(certain, 0)).unwrap();
                prop_assert_eq!(store.rows().len() + store.queue().len(), images.len());
                for r in store.rows() {
                    prop_assert!(r.bbox.area() / 10_000.0 >= certain);
                }
                for q in store.queue() {
                    prop_assert!(q.best_candidate.as_ref().unwrap().bbox.area() / 10_000.0 < certain);
                }
            }

            #[test]
            fn raising_certain_size_never_promotes(fracs in proptest::collection::vec(0.001f64..1.0, 1..40), lo in 0.01f64..0.5, bump in 0.0f64..0.5) {
                let images = paths("img", fracs.len());
                let mut a = AnnotationStore::new();
                a.auto_annotate(&images, &mut fraction_detector(fracs.clone()), &cfg(lo, 0)).unwrap();
                let mut b = AnnotationStore::new();
                b.auto_annotate(&images, &mut fraction_detector(fracs.clone()), &cfg(lo + bump, 0)).unwrap();
                let auto_a: BTreeSet<&str> = a.rows().iter().map(|r| r.image_path.as_str()).collect();
                for r in b.rows() {
                    prop_assert!(auto_a.contains(r.image_path.as_str()));
                }
            }
        }
    }
}
