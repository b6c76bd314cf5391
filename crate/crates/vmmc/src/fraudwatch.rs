//! Plate fraud service.
//!
//! Holds the registry as an immutable snapshot that is swapped whole on
//! every change, so an observation is always judged against one consistent
//! registry. Verdicts are kept in memory for the dashboard and, with
//! registration events and skipped frames, appended to a JSON-lines audit
//! log.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use vmmc_core::fraud::{evaluate, normalize_plate, FraudError, Observation, RegisterOutcome, Registry, RegistryEntry, Verdict, VerdictStatus, DEFAULT_CONFIDENCE_FLOOR};
use vmmc_core::{ClassId, ClassScores};

use crate::checkpoint::LoadedClassifier;
use crate::detection::open_rgb;
use crate::evaluation::{score_entries, scores_from_entries, ScoreEntry};
use crate::imaging::{preprocess_rgb, to_chw};
use crate::manifest::write_atomic;

#[derive(Debug, thiserror::Error)]
pub enum FraudServiceError {
    #[error(transparent)]
    Fraud(#[from] FraudError),
    #[error("registry line {line}: {reason}")]
    Registry { line: u64, reason: String },
    #[error("unknown class id {0}")]
    UnknownClass(i64),
    #[error("observation needs {0}")]
    Incomplete(&'static str),
    #[error("class scores must hold 7 probabilities summing to 1")]
    BadScores,
    #[error("classifier: {0}")]
    Classifier(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads `plate,class_id` rows.
pub fn load_registry(path: &Path) -> Result<Registry, FraudServiceError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().ne(["plate", "class_id"]) {
        return Err(FraudServiceError::Registry { line: 1, reason: "expected header plate,class_id".into() });
    }
    let mut registry = Registry::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |reason: String| FraudServiceError::Registry { line, reason };
        if row.len() != 2 {
            return Err(bad(format!("expected 2 fields, found {}", row.len())));
        }
        let class_id = row[1].parse::<i64>().ok().and_then(|v| ClassId::try_from(v).ok()).ok_or_else(|| bad(format!("unknown class id {:?}", &row[1])))?;
        registry.register(&row[0], class_id).map_err(|e| bad(e.to_string()))?;
    }
    Ok(registry)
}

pub fn registry_csv(registry: &Registry) -> String {
    let mut out = String::from("plate,class_id\n");
    for e in registry.iter() {
        out.push_str(&format!("{},{}\n", e.plate, e.class_id.index()));
    }
    out
}

/// Extracts plate text from a camera frame.
pub trait PlateReader: Send + Sync {
    /// `None` when no plate could be read, including reader timeouts.
    fn read(&self, image: &Path) -> Option<String>;
}

/// Reads the plate from a `<image>.plate` text file beside the image.
pub struct SidecarPlateReader;

impl PlateReader for SidecarPlateReader {
    fn read(&self, image: &Path) -> Option<String> {
        let mut name = image.as_os_str().to_owned();
        name.push(".plate");
        let text = fs::read_to_string(PathBuf::from(name)).ok()?;
        let plate = text.trim();
        (!plate.is_empty()).then(|| plate.to_string())
    }
}

/// Predicts the make-model class of the vehicle in a frame.
pub trait VehicleClassifier: Send + Sync {
    fn classify(&self, image: &Path) -> Result<ClassScores, String>;
}

impl VehicleClassifier for LoadedClassifier {
    fn classify(&self, image: &Path) -> Result<ClassScores, String> {
        let img = open_rgb(image).map_err(|e| e.to_string())?;
        let pixels = to_chw(&preprocess_rgb(&img, self.input_size()).map_err(|e| e.to_string())?);
        self.net.predict(&pixels).map_err(|e| e.to_string())
    }
}

/// Class scores as either seven probabilities in class order or
/// `[{"class":k,"prob":p}, ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScoresInput {
    Plain(Vec<f64>),
    Entries(Vec<ScoreEntry>),
}

impl ScoresInput {
    pub fn to_scores(&self) -> Option<ClassScores> {
        match self {
            ScoresInput::Plain(p) => ClassScores::from_probabilities(p).ok(),
            ScoresInput::Entries(e) => scores_from_entries(e),
        }
    }
}

/// Body of `POST /observe`. The plate comes from `plate` or is read from
/// `plate_image`; the class from `class_scores` or by classifying
/// `vehicle_image`. Image paths resolve against the service's image root.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObserveRequest {
    #[serde(default)]
    pub plate: Option<String>,
    #[serde(default)]
    pub plate_image: Option<String>,
    #[serde(default)]
    pub class_scores: Option<ScoresInput>,
    #[serde(default)]
    pub vehicle_image: Option<String>,
    #[serde(default)]
    pub camera_id: Option<String>,
    #[serde(default)]
    pub timestamp_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryJson {
    pub plate: String,
    pub class_id: usize,
}

impl From<&RegistryEntry> for EntryJson {
    fn from(e: &RegistryEntry) -> Self {
        Self { plate: e.plate.clone(), class_id: e.class_id.index() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationJson {
    pub plate: String,
    pub predicted: Vec<ScoreEntry>,
    pub timestamp_ms: u64,
    pub camera_id: String,
}

/// Wire form of a verdict. `registry_class` and `top_class` sit side by side
/// so a fraud shows both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictJson {
    pub status: String,
    pub observation: ObservationJson,
    pub matched_entry: Option<EntryJson>,
    pub registry_class: Option<usize>,
    pub top_class: usize,
    pub top_prob: f64,
    /// Earlier low-confidence verdicts for the same plate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_confidence_repeats: Option<u32>,
}

impl VerdictJson {
    pub fn new(v: &Verdict, repeats: Option<u32>) -> Self {
        Self {
            status: v.status.as_str().into(),
            observation: ObservationJson {
                plate: v.observation.plate.clone(),
                predicted: score_entries(&v.observation.predicted),
                timestamp_ms: v.observation.timestamp_ms,
                camera_id: v.observation.camera_id.clone(),
            },
            matched_entry: v.matched_entry.as_ref().map(EntryJson::from),
            registry_class: v.matched_entry.as_ref().map(|e| e.class_id.index()),
            top_class: v.top_class.index(),
            top_prob: v.top_prob,
            low_confidence_repeats: repeats,
        }
    }
}

/// What became of an observation.
#[derive(Debug, Clone, PartialEq)]
pub enum ObserveOutcome {
    Verdict(VerdictJson),
    /// The plate could not be read; `skips` is the running total.
    Skipped { skips: u64 },
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

pub struct FraudService {
    registry: RwLock<Arc<Registry>>,
    registry_path: Option<PathBuf>,
    audit_path: Option<PathBuf>,
    audit: Mutex<()>,
    verdicts: Mutex<Vec<VerdictJson>>,
    floor: f64,
    reader: Box<dyn PlateReader>,
    classifier: Option<Box<dyn VehicleClassifier>>,
    image_root: PathBuf,
    skips: AtomicU64,
    low_confidence: Mutex<HashMap<String, u32>>,
    writes: Mutex<()>,
}

impl FraudService {
    pub fn new(registry: Registry) -> Self {
        Self {
            registry: RwLock::new(Arc::new(registry)),
            registry_path: None,
            audit_path: None,
            audit: Mutex::new(()),
            verdicts: Mutex::new(Vec::new()),
            floor: DEFAULT_CONFIDENCE_FLOOR,
            reader: Box::new(SidecarPlateReader),
            classifier: None,
            image_root: PathBuf::from("."),
            skips: AtomicU64::new(0),
            low_confidence: Mutex::new(HashMap::new()),
            writes: Mutex::new(()),
        }
    }

    /// Loads the registry file and writes registrations back to it. A
    /// missing file starts an empty registry.
    pub fn with_registry_file(path: &Path) -> Result<Self, FraudServiceError> {
        let registry = if path.is_file() { load_registry(path)? } else { Registry::new() };
        Ok(Self { registry_path: Some(path.to_path_buf()), ..Self::new(registry) })
    }

    pub fn with_audit_log(mut self, path: &Path) -> Self {
        self.audit_path = Some(path.to_path_buf());
        self
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn with_reader(mut self, reader: Box<dyn PlateReader>) -> Self {
        self.reader = reader;
        self
    }

    pub fn with_classifier(mut self, classifier: Box<dyn VehicleClassifier>) -> Self {
        self.classifier = Some(classifier);
        self
    }

    pub fn with_image_root(mut self, root: &Path) -> Self {
        self.image_root = root.to_path_buf();
        self
    }

    pub fn snapshot(&self) -> Arc<Registry> {
        self.registry.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn swap(&self, registry: Registry) {
        *self.registry.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(registry);
    }

    fn audit(&self, event: serde_json::Value) -> Result<(), FraudServiceError> {
        let Some(path) = &self.audit_path else { return Ok(()) };
        let _guard = self.audit.lock().unwrap_or_else(|e| e.into_inner());
        let mut line = serde_json::to_vec(&event)?;
        line.push(b'\n');
        fs::OpenOptions::new().create(true).append(true).open(path)?.write_all(&line)?;
        Ok(())
    }

    /// Re-reads the registry file and swaps it in whole.
    pub fn reload(&self) -> Result<usize, FraudServiceError> {
        let Some(path) = &self.registry_path else { return Ok(self.snapshot().len()) };
        let registry = load_registry(path)?;
        let n = registry.len();
        self.swap(registry);
        self.audit(serde_json::json!({ "event": "reload", "entries": n }))?;
        Ok(n)
    }

    /// Upserts a binding, persists the registry and audits the outcome.
    pub fn register(&self, plate: &str, class_id: ClassId) -> Result<RegisterOutcome, FraudServiceError> {
        let _guard = self.writes.lock().unwrap_or_else(|e| e.into_inner());
        let mut next = (*self.snapshot()).clone();
        let outcome = next.register(plate, class_id)?;
        if let Some(path) = &self.registry_path {
            write_atomic(path, registry_csv(&next).as_bytes())?;
        }
        let entry = EntryJson::from(outcome.entry());
        let event = match &outcome {
            RegisterOutcome::Inserted(_) => serde_json::json!({ "event": "register", "outcome": "inserted", "entry": entry }),
            RegisterOutcome::Unchanged(_) => serde_json::json!({ "event": "register", "outcome": "unchanged", "entry": entry }),
            RegisterOutcome::Superseded { previous, .. } => {
                log::info!("plate {} moved from class {} to {}", entry.plate, previous.index(), entry.class_id);
                serde_json::json!({ "event": "register", "outcome": "superseded", "entry": entry, "previous_class": previous.index() })
            }
        };
        self.swap(next);
        self.audit(event)?;
        Ok(outcome)
    }

    pub fn skips(&self) -> u64 {
        self.skips.load(Ordering::SeqCst)
    }

    /// Decides an observation and records the verdict.
    pub fn observe(&self, req: &ObserveRequest) -> Result<ObserveOutcome, FraudServiceError> {
        let plate = match (&req.plate, &req.plate_image) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(img)) => self.reader.read(&self.image_root.join(img)),
            (None, None) => return Err(FraudServiceError::Incomplete("plate or plate_image")),
        };
        let Some(plate) = plate else {
            let skips = self.skips.fetch_add(1, Ordering::SeqCst) + 1;
            log::info!("plate unreadable in {:?}; {skips} frames skipped", req.plate_image);
            self.audit(serde_json::json!({ "event": "skip", "plate_image": req.plate_image, "skips": skips }))?;
            return Ok(ObserveOutcome::Skipped { skips });
        };
        let predicted = match (&req.class_scores, &req.vehicle_image, &self.classifier) {
            (Some(s), _, _) => s.to_scores().ok_or(FraudServiceError::BadScores)?,
            (None, Some(img), Some(c)) => c.classify(&self.image_root.join(img)).map_err(FraudServiceError::Classifier)?,
            (None, Some(_), None) => return Err(FraudServiceError::Incomplete("class_scores (no classifier is loaded)")),
            (None, None, _) => return Err(FraudServiceError::Incomplete("class_scores or vehicle_image")),
        };
        let observation = Observation { plate, predicted, timestamp_ms: req.timestamp_ms.unwrap_or_else(now_ms), camera_id: req.camera_id.clone().unwrap_or_default() };
        let verdict = evaluate(&observation, &self.snapshot(), self.floor)?;

        let repeats = if verdict.status == VerdictStatus::LowConfidence {
            let mut seen = self.low_confidence.lock().unwrap_or_else(|e| e.into_inner());
            let count = seen.entry(normalize_plate(&observation.plate)).or_insert(0);
            let earlier = *count;
            *count += 1;
            if earlier > 0 {
                log::warn!("plate {} observed with low confidence {} times", observation.plate, earlier + 1);
            }
            Some(earlier)
        } else {
            None
        };
        let json = VerdictJson::new(&verdict, repeats);
        self.audit(serde_json::json!({ "event": "verdict", "verdict": json }))?;
        self.verdicts.lock().unwrap_or_else(|e| e.into_inner()).push(json.clone());
        Ok(ObserveOutcome::Verdict(json))
    }

    /// Recorded verdicts, newest first; later arrivals win timestamp ties.
    pub fn verdicts(&self, status: Option<VerdictStatus>) -> Vec<VerdictJson> {
        let all = self.verdicts.lock().unwrap_or_else(|e| e.into_inner());
        let mut out: Vec<(usize, &VerdictJson)> = all.iter().enumerate().filter(|(_, v)| status.is_none_or(|s| v.status == s.as_str())).collect();
        out.sort_by(|a, b| b.1.observation.timestamp_ms.cmp(&a.1.observation.timestamp_ms).then(b.0.cmp(&a.0)));
        out.into_iter().map(|(_, v)| v.clone()).collect()
    }
}
