//! Checkpoint directories.
//!
//! A checkpoint directory holds `weights.safetensors`, a `config.json`
//! describing the model and how it was trained, and `metrics.csv` with one
//! row per epoch. Run directories use the same layout, so a finished run
//! can be loaded as a checkpoint.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vmmc_nn::checkpoint::{load_weights, save_weights};
use vmmc_nn::ssd::{build_detector, DetEpochMetrics, DetTrainConfig, DetectConfig, SsdNetwork, SsdSpec};
use vmmc_nn::{build_network, ClassifierNetwork, ClassifierSpec, EpochMetrics, TrainConfig};

use crate::imaging::AugmentationConfig;
use crate::manifest::write_atomic;

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{0} is not a checkpoint directory")]
    Missing(String),
    #[error("checkpoint holds a {found}, expected a {expected}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error(transparent)]
    Nn(#[from] vmmc_nn::NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Model description stored in `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Classifier { spec: ClassifierSpec, train: TrainConfig, augmentation: AugmentationConfig },
    Detector { spec: SsdSpec, train: DetTrainConfig, detect: DetectConfig },
}

impl ModelConfig {
    fn kind(&self) -> &'static str {
        match self {
            ModelConfig::Classifier { .. } => "classifier",
            ModelConfig::Detector { .. } => "detector",
        }
    }
}

/// Contents of `config.json`: the model plus free-form run details.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub run: serde_json::Value,
}

pub fn write_config(dir: &Path, config: &CheckpointConfig) -> Result<(), CheckpointError> {
    write_atomic(&dir.join(CONFIG_FILE), &serde_json::to_vec_pretty(config)?)?;
    Ok(())
}

pub fn read_config(dir: &Path) -> Result<CheckpointConfig, CheckpointError> {
    let path = dir.join(CONFIG_FILE);
    if !path.is_file() || !dir.join(WEIGHTS_FILE).is_file() {
        return Err(CheckpointError::Missing(dir.display().to_string()));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), CheckpointError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

/// `epoch,train_loss,train_acc,val_loss,val_acc`
pub fn write_classifier_metrics(path: &Path, epochs: &[EpochMetrics]) -> Result<(), CheckpointError> {
    write_rows(path, epochs)
}

pub fn read_classifier_metrics(path: &Path) -> Result<Vec<EpochMetrics>, CheckpointError> {
    Ok(csv::Reader::from_path(path)?.deserialize().collect::<Result<_, _>>()?)
}

/// `epoch,loss,confidence,localization`
pub fn write_detector_metrics(path: &Path, epochs: &[DetEpochMetrics]) -> Result<(), CheckpointError> {
    write_rows(path, epochs)
}

pub fn save_classifier(dir: &Path, net: &ClassifierNetwork, config: &CheckpointConfig, epochs: &[EpochMetrics]) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    save_weights(net, &dir.join(WEIGHTS_FILE))?;
    write_config(dir, config)?;
    write_classifier_metrics(&dir.join(METRICS_FILE), epochs)
}

pub fn save_detector(dir: &Path, net: &SsdNetwork, config: &CheckpointConfig, epochs: &[DetEpochMetrics]) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    save_weights(net, &dir.join(WEIGHTS_FILE))?;
    write_config(dir, config)?;
    write_detector_metrics(&dir.join(METRICS_FILE), epochs)
}

/// A classifier checkpoint ready for inference.
pub struct LoadedClassifier {
    pub net: ClassifierNetwork,
    pub config: CheckpointConfig,
}

impl LoadedClassifier {
    pub fn input_size(&self) -> u32 {
        self.net.spec().input_size as u32
    }
}

pub fn load_classifier(dir: &Path) -> Result<LoadedClassifier, CheckpointError> {
    let config = read_config(dir)?;
    let ModelConfig::Classifier { spec, .. } = &config.model else {
        return Err(CheckpointError::WrongKind { expected: "classifier", found: config.model.kind() });
    };
    let mut net = build_network(spec, 0)?;
    load_weights(&mut net, &dir.join(WEIGHTS_FILE))?;
    Ok(LoadedClassifier { net, config })
}

/// A detector checkpoint with its detection settings.
pub struct LoadedDetector {
    pub net: SsdNetwork,
    pub detect: DetectConfig,
    pub config: CheckpointConfig,
}

pub fn load_detector(dir: &Path) -> Result<LoadedDetector, CheckpointError> {
    let config = read_config(dir)?;
    let ModelConfig::Detector { spec, detect, .. } = &config.model else {
        return Err(CheckpointError::WrongKind { expected: "detector", found: config.model.kind() });
    };
    let mut net = build_detector(spec, 0)?;
    load_weights(&mut net, &dir.join(WEIGHTS_FILE))?;
    let detect = *detect;
    Ok(LoadedDetector { net, detect, config })
}
