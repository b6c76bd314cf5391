//! Review queue service.
//!
//! Wraps an [`AnnotationStore`] behind a mutex so decisions are serialized,
//! and after every change rewrites the annotation CSV and the queue file
//! next to it. A campaign can stop at any point and resume from those two
//! files.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use vmmc_core::annotation::{AnnotationError, AnnotationRow, AnnotationStore, Decision, DetectionCandidate, ReviewItem, ReviewStats, ReviewStatus};
use vmmc_core::dataset::ImageSize;
use vmmc_core::{BoundingBox, ClassId};

use crate::manifest::{export_csv, parse_records, write_atomic, ManifestIoError};

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("review item {0} is leased to another session")]
    Leased(u64),
    #[error("unknown class id {0}")]
    UnknownClass(i64),
    #[error("bad box: {0}")]
    BadBox(String),
    #[error("queue file: {0}")]
    Queue(String),
    #[error(transparent)]
    Manifest(#[from] ManifestIoError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateJson {
    pub bbox: [f64; 4],
    pub confidence: f64,
    pub detector_class: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeJson {
    pub width: u32,
    pub height: u32,
}

/// Wire and file form of a review item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItemJson {
    pub id: u64,
    pub image_path: String,
    pub folder_class: usize,
    pub size: Option<SizeJson>,
    pub best_candidate: Option<CandidateJson>,
    pub status: String,
    pub assigned_class: Option<usize>,
}

impl From<&ReviewItem> for ReviewItemJson {
    fn from(q: &ReviewItem) -> Self {
        Self {
            id: q.id,
            image_path: q.image_path.clone(),
            folder_class: q.folder_class.index(),
            size: q.size.map(|s| SizeJson { width: s.width, height: s.height }),
            best_candidate: q.best_candidate.as_ref().map(|c| CandidateJson { bbox: c.bbox.to_array(), confidence: c.confidence, detector_class: c.detector_class.clone() }),
            status: q.status.as_str().into(),
            assigned_class: q.assigned_class.map(ClassId::index),
        }
    }
}

fn class(i: usize) -> Result<ClassId, ReviewError> {
    ClassId::from_index(i).map_err(|_| ReviewError::UnknownClass(i as i64))
}

impl ReviewItemJson {
    pub fn to_item(&self) -> Result<ReviewItem, ReviewError> {
        let best_candidate = match &self.best_candidate {
            Some(c) => {
                let [x0, y0, x1, y1] = c.bbox;
                let bbox = BoundingBox::pixel(x0, y0, x1, y1).map_err(|e| ReviewError::BadBox(e.to_string()))?;
                Some(DetectionCandidate { bbox, confidence: c.confidence, detector_class: c.detector_class.clone() })
            }
            None => None,
        };
        Ok(ReviewItem {
            id: self.id,
            image_path: self.image_path.clone(),
            folder_class: class(self.folder_class)?,
            size: self.size.map(|s| ImageSize { width: s.width, height: s.height }),
            best_candidate,
            status: ReviewStatus::parse(&self.status).ok_or_else(|| ReviewError::Queue(format!("bad status {:?}", self.status)))?,
            assigned_class: self.assigned_class.map(class).transpose()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsJson {
    pub pending: usize,
    pub labeled: usize,
    pub deleted: usize,
    pub auto_rows: usize,
    pub human_rows: usize,
}

impl From<ReviewStats> for StatsJson {
    fn from(s: ReviewStats) -> Self {
        Self { pending: s.pending, labeled: s.labeled, deleted: s.deleted, auto_rows: s.auto_rows, human_rows: s.human_rows }
    }
}

/// Body of a decision: `{"action":"label","class_id":3,"bbox":[x0,y0,x1,y1]}`
/// or `{"action":"delete"}`. A label without `bbox` keeps the candidate box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum DecisionJson {
    Label {
        class_id: i64,
        #[serde(default)]
        bbox: Option<[f64; 4]>,
    },
    Delete,
}

impl DecisionJson {
    pub fn to_decision(&self) -> Result<Decision, ReviewError> {
        match self {
            DecisionJson::Delete => Ok(Decision::Delete),
            DecisionJson::Label { class_id, bbox } => {
                let class_id = ClassId::try_from(*class_id).map_err(|_| ReviewError::UnknownClass(*class_id))?;
                let bbox = match bbox {
                    Some([x0, y0, x1, y1]) => Some(BoundingBox::pixel(*x0, *y0, *x1, *y1).map_err(|e| ReviewError::BadBox(e.to_string()))?),
                    None => None,
                };
                Ok(Decision::Label { class_id, bbox })
            }
        }
    }
}

/// `annotations.csv` keeps its queue in `annotations.queue.json`.
pub fn queue_path_for(annotations: &Path) -> PathBuf {
    annotations.with_extension("queue.json")
}

pub fn save_queue(store: &AnnotationStore, path: &Path) -> Result<(), ReviewError> {
    let items: Vec<ReviewItemJson> = store.queue().iter().map(ReviewItemJson::from).collect();
    write_atomic(path, &serde_json::to_vec_pretty(&items)?)?;
    Ok(())
}

/// Writes the annotation CSV and its queue file.
pub fn save_store(store: &AnnotationStore, annotations: &Path) -> Result<(), ReviewError> {
    export_csv(store, annotations)?;
    save_queue(store, &queue_path_for(annotations))
}

/// Reads a store written by [`save_store`]. A missing queue file means an
/// empty queue.
pub fn load_store(annotations: &Path) -> Result<AnnotationStore, ReviewError> {
    let rows = parse_records(&fs::read_to_string(annotations)?)?
        .into_iter()
        .map(|r| {
            let bbox = r.bbox.ok_or_else(|| ReviewError::BadBox(format!("annotation row {:?} has no box", r.image_path)))?;
            Ok(AnnotationRow { image_path: r.image_path, class_id: r.class_id, bbox, source: r.source })
        })
        .collect::<Result<Vec<_>, ReviewError>>()?;
    let queue_path = queue_path_for(annotations);
    let queue = if queue_path.is_file() {
        let items: Vec<ReviewItemJson> = serde_json::from_slice(&fs::read(&queue_path)?)?;
        items.iter().map(ReviewItemJson::to_item).collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    Ok(AnnotationStore::from_parts(rows, queue))
}

/// Default time an annotator holds an item fetched with a session.
pub const DEFAULT_LEASE: Duration = Duration::from_secs(120);

#[derive(Debug, Clone)]
struct Lease {
    session: String,
    expires: Instant,
}

struct State {
    store: AnnotationStore,
    leases: HashMap<u64, Lease>,
    /// Idempotency key to the item the keyed decision produced.
    replies: HashMap<String, ReviewItem>,
}

/// Shared review state for the HTTP API.
///
/// Items fetched with a session are leased to it: other sessions skip them
/// and cannot decide them until the lease expires. A decision sent again
/// with the same idempotency key returns the first result instead of
/// mutating twice.
pub struct ReviewService {
    state: Mutex<State>,
    image_root: PathBuf,
    annotations: Option<PathBuf>,
    lease: Duration,
}

impl ReviewService {
    /// In-memory service; nothing is written to disk.
    pub fn new(store: AnnotationStore, image_root: PathBuf) -> Self {
        Self { state: Mutex::new(State { store, leases: HashMap::new(), replies: HashMap::new() }), image_root, annotations: None, lease: DEFAULT_LEASE }
    }

    /// Resumes a campaign from its annotation CSV. Images resolve against
    /// the CSV's directory and every change is written back.
    pub fn open(annotations: &Path) -> Result<Self, ReviewError> {
        let store = load_store(annotations)?;
        let image_root = annotations.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { annotations: Some(annotations.to_path_buf()), ..Self::new(store, image_root) })
    }

    pub fn with_lease(mut self, lease: Duration) -> Self {
        self.lease = lease;
        self
    }

    pub fn with_image_root(mut self, root: PathBuf) -> Self {
        self.image_root = root;
        self
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn persist(&self, store: &AnnotationStore) -> Result<(), ReviewError> {
        match &self.annotations {
            Some(path) => save_store(store, path),
            None => Ok(()),
        }
    }

    /// First pending item, without leasing it.
    pub fn next(&self) -> Option<ReviewItem> {
        self.lock().store.next_pending().cloned()
    }

    /// First pending item not held by another live session; leases it to
    /// `session` until `now` plus the lease time.
    pub fn lease_next(&self, session: &str, now: Instant) -> Option<(ReviewItem, Duration)> {
        let mut state = self.lock();
        let State { store, leases, .. } = &mut *state;
        leases.retain(|_, l| l.expires > now);
        let item = store.queue().iter().find(|q| q.status == ReviewStatus::Pending && leases.get(&q.id).is_none_or(|l| l.session == session))?.clone();
        leases.insert(item.id, Lease { session: session.into(), expires: now + self.lease });
        Some((item, self.lease))
    }

    pub fn item(&self, id: u64) -> Option<ReviewItem> {
        self.lock().store.item(id).cloned()
    }

    pub fn stats(&self) -> ReviewStats {
        self.lock().store.stats()
    }

    pub fn decide(&self, id: u64, decision: Decision) -> Result<ReviewItem, ReviewError> {
        self.decide_as(id, decision, None, None, Instant::now())
    }

    /// Applies a decision on behalf of `session`. Fails with
    /// [`ReviewError::Leased`] while another session holds the item. A
    /// repeated `key` returns the item its first use produced.
    pub fn decide_as(&self, id: u64, decision: Decision, session: Option<&str>, key: Option<&str>, now: Instant) -> Result<ReviewItem, ReviewError> {
        let mut state = self.lock();
        if let Some(done) = key.and_then(|k| state.replies.get(k)) {
            return Ok(done.clone());
        }
        if let Some(lease) = state.leases.get(&id) {
            if lease.expires > now && Some(lease.session.as_str()) != session {
                return Err(ReviewError::Leased(id));
            }
        }
        let item = state.store.apply_decision(id, decision)?.clone();
        state.leases.remove(&id);
        if let Some(k) = key {
            state.replies.insert(k.to_string(), item.clone());
        }
        self.persist(&state.store)?;
        Ok(item)
    }

    pub fn reopen(&self, image_path: &str) -> Result<u64, ReviewError> {
        let mut state = self.lock();
        let id = state.store.reopen(image_path)?;
        self.persist(&state.store)?;
        Ok(id)
    }

    /// File of a queued image.
    pub fn image_file(&self, id: u64) -> Option<PathBuf> {
        self.lock().store.item(id).map(|q| self.image_root.join(&q.image_path))
    }

    pub fn snapshot(&self) -> AnnotationStore {
        self.lock().store.clone()
    }
}
