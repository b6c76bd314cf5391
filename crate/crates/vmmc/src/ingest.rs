//! Class folders on disk.
//!
//! A corpus root holds one folder per class. The folder to class mapping
//! comes from `classes.json` (`[{"folder": "...", "class_id": k}, ...]`) or,
//! without one, from a leading number in the folder name (`3-passat`,
//! `3_passat`).

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vmmc_core::dataset::{ImageRecord, Source};
use vmmc_core::ClassId;

use crate::manifest::probe_size;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("folder {0:?} has no class: add it to classes.json or prefix it with a class id")]
    UnmappedFolder(String),
    #[error("classes.json: {0}")]
    Classes(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFolder {
    pub folder: String,
    pub class_id: usize,
}

pub fn read_class_folders(path: &Path) -> Result<Vec<(String, ClassId)>, IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let folders: Vec<ClassFolder> = serde_json::from_str(&text).map_err(|e| IngestError::Classes(e.to_string()))?;
    folders
        .into_iter()
        .map(|f| ClassId::from_index(f.class_id).map(|c| (f.folder, c)).map_err(|_| IngestError::Classes(format!("unknown class id {}", f.class_id))))
        .collect()
}

/// Class named by a leading number followed by `-`, `_` or a space.
pub fn folder_class(name: &str) -> Option<ClassId> {
    let digits: String = name.chars().take_while(char::is_ascii_digit).collect();
    let rest = &name[digits.len()..];
    if digits.is_empty() || !(rest.is_empty() || rest.starts_with(['-', '_', ' '])) {
        return None;
    }
    ClassId::from_index(digits.parse().ok()?).ok()
}

pub fn is_image(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("png" | "jpg" | "jpeg"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>, IngestError> {
    let mut entries = fs::read_dir(dir).map_err(io_err(dir))?.collect::<Result<Vec<_>, _>>().map_err(io_err(dir))?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

/// Class folders under `root` with their images as `folder/file` paths,
/// sorted. Uses `root/classes.json` when present.
pub fn class_images(root: &Path, classes: Option<&Path>) -> Result<Vec<(Vec<String>, ClassId)>, IngestError> {
    let default = root.join("classes.json");
    let mapping = match classes {
        Some(p) => Some(read_class_folders(p)?),
        None if default.is_file() => Some(read_class_folders(&default)?),
        None => None,
    };
    let mut out = Vec::new();
    for entry in sorted_entries(root)? {
        if !entry.path().is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let class = match &mapping {
            Some(m) => m.iter().find(|(f, _)| *f == name).map(|(_, c)| *c),
            None => folder_class(&name),
        };
        let Some(class) = class else {
            if mapping.is_some() {
                log::warn!("skipping folder {name:?}: not listed in classes.json");
                continue;
            }
            return Err(IngestError::UnmappedFolder(name));
        };
        let images: Vec<String> = sorted_entries(&entry.path())?
            .into_iter()
            .filter(|e| is_image(&e.path()))
            .map(|e| format!("{name}/{}", e.file_name().to_string_lossy()))
            .collect();
        out.push((images, class));
    }
    Ok(out)
}

/// Folder-labeled records without boxes. Folder labels are human labels.
pub fn ingest_dir(root: &Path, classes: Option<&Path>) -> Result<Vec<ImageRecord>, IngestError> {
    let mut records = Vec::new();
    for (images, class_id) in class_images(root, classes)? {
        for image_path in images {
            let size = probe_size(&root.join(&image_path));
            records.push(ImageRecord { image_path, class_id, bbox: None, source: Source::Human, size });
        }
    }
    Ok(records)
}
