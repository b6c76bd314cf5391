//! License plate fraud rules.
//!
//! A registry binds each plate to the make-model class it was issued for.
//! An observation pairs a read plate with the classifier's scores for the
//! vehicle carrying it; when the plate is registered but the observed class
//! differs, the plate is being used on the wrong vehicle.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::scores::ClassScores;
use crate::taxonomy::ClassId;

/// Default minimum top-class probability for a definite verdict.
pub const DEFAULT_CONFIDENCE_FLOOR: f64 = 0.8;

/// Uppercases and drops everything but letters and digits:
/// `"16 abc-123"` becomes `"16ABC123"`.
pub fn normalize_plate(plate: &str) -> String {
    plate.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_uppercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FraudError {
    #[error("plate {0:?} is empty after normalization")]
    EmptyPlate(String),
    #[error("confidence floor {0} is outside [0, 1]")]
    BadFloor(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RegistryEntry {
    pub plate: String,
    pub class_id: ClassId,
}

/// Result of a registration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegisterOutcome {
    Inserted(RegistryEntry),
    Unchanged(RegistryEntry),
    /// The plate was bound to `previous` and now points at the new class.
    Superseded { entry: RegistryEntry, previous: ClassId },
}

impl RegisterOutcome {
    pub fn entry(&self) -> &RegistryEntry {
        match self {
            RegisterOutcome::Inserted(e) | RegisterOutcome::Unchanged(e) => e,
            RegisterOutcome::Superseded { entry, .. } => entry,
        }
    }
}

/// Plate to class bindings keyed by normalized plate.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Registry {
    entries: BTreeMap<String, ClassId>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Upserts a binding.
    pub fn register(&mut self, plate: &str, class_id: ClassId) -> Result<RegisterOutcome, FraudError> {
        let key = normalize_plate(plate);
        if key.is_empty() {
            return Err(FraudError::EmptyPlate(plate.into()));
        }
        let entry = RegistryEntry { plate: key.clone(), class_id };
        Ok(match self.entries.insert(key, class_id) {
            None => RegisterOutcome::Inserted(entry),
            Some(prev) if prev == class_id => RegisterOutcome::Unchanged(entry),
            Some(previous) => RegisterOutcome::Superseded { entry, previous },
        })
    }

    pub fn lookup(&self, plate: &str) -> Option<RegistryEntry> {
        let key = normalize_plate(plate);
        self.entries.get(&key).map(|&class_id| RegistryEntry { plate: key, class_id })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = RegistryEntry> + '_ {
        self.entries.iter().map(|(p, &c)| RegistryEntry { plate: p.clone(), class_id: c })
    }
}

/// A plate read together with the predicted make-model of its vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub plate: String,
    pub predicted: ClassScores,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    pub camera_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerdictStatus {
    Authorized,
    Fraud,
    Unregistered,
    LowConfidence,
}

impl VerdictStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictStatus::Authorized => "authorized",
            VerdictStatus::Fraud => "fraud",
            VerdictStatus::Unregistered => "unregistered",
            VerdictStatus::LowConfidence => "low_confidence",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "authorized" => Some(VerdictStatus::Authorized),
            "fraud" => Some(VerdictStatus::Fraud),
            "unregistered" => Some(VerdictStatus::Unregistered),
            "low_confidence" => Some(VerdictStatus::LowConfidence),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub status: VerdictStatus,
    pub observation: Observation,
    pub matched_entry: Option<RegistryEntry>,
    pub top_class: ClassId,
    pub top_prob: f64,
}

/// Decides an observation against a registry snapshot.
///
/// Low confidence is checked first, then registration, then the class match.
pub fn evaluate(observation: &Observation, registry: &Registry, confidence_floor: f64) -> Result<Verdict, FraudError> {
    if !(0.0..=1.0).contains(&confidence_floor) {
        return Err(FraudError::BadFloor(confidence_floor.to_bits()));
    }
    if normalize_plate(&observation.plate).is_empty() {
        return Err(FraudError::EmptyPlate(observation.plate.clone()));
    }
    let (top_class, top_prob) = observation.predicted.top();
    let matched_entry = registry.lookup(&observation.plate);
    let status = if top_prob < confidence_floor {
        VerdictStatus::LowConfidence
    } else {
        match &matched_entry {
            None => VerdictStatus::Unregistered,
            Some(e) if e.class_id == top_class => VerdictStatus::Authorized,
            Some(_) => VerdictStatus::Fraud,
        }
    };
    Ok(Verdict { status, observation: observation.clone(), matched_entry, top_class, top_prob })
}
