//! Manifest and annotation CSV files.
//!
//! One header line, `image_path,class_id,xmin,ymin,xmax,ymax,source`, then one
//! LF-terminated row per image. Box cells are either all empty or all set and
//! are written in shortest round-trip decimal form. Paths are relative to the
//! directory holding the file.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use vmmc_core::annotation::AnnotationStore;
use vmmc_core::dataset::{DatasetManifest, ImageRecord, ImageSize, ManifestError, Source};
use vmmc_core::{BoundingBox, ClassId};

pub const HEADER: [&str; 7] = ["image_path", "class_id", "xmin", "ymin", "xmax", "ymax", "source"];

#[derive(Debug, thiserror::Error)]
pub enum ManifestIoError {
    #[error("manifest {0} does not exist")]
    Missing(PathBuf),
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("line {line}: unknown class id {value:?}")]
    UnknownClass { line: u64, value: String },
    #[error(transparent)]
    Invalid(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn malformed(line: u64, reason: impl Into<String>) -> ManifestIoError {
    ManifestIoError::Malformed { line, reason: reason.into() }
}

/// Parses manifest text without touching the file system.
pub fn parse_records(text: &str) -> Result<Vec<ImageRecord>, ManifestIoError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = Vec::new();
    let mut header_seen = false;
    for row in reader.records() {
        let row = row.map_err(|e| malformed(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        if !header_seen {
            if row.iter().ne(HEADER) {
                return Err(malformed(line, format!("expected header {}", HEADER.join(","))));
            }
            header_seen = true;
            continue;
        }
        if row.len() != HEADER.len() {
            return Err(malformed(line, format!("expected {} fields, found {}", HEADER.len(), row.len())));
        }
        let image_path = row[0].to_string();
        if image_path.is_empty() {
            return Err(malformed(line, "empty image path"));
        }
        let class_id = row[1]
            .parse::<i64>()
            .ok()
            .and_then(|v| ClassId::try_from(v).ok())
            .ok_or_else(|| ManifestIoError::UnknownClass { line, value: row[1].to_string() })?;
        let cells: Vec<&str> = (2..6).map(|i| &row[i]).collect();
        let bbox = if cells.iter().all(|c| c.is_empty()) {
            None
        } else {
            let mut v = [0.0; 4];
            for (slot, cell) in v.iter_mut().zip(&cells) {
                *slot = cell.parse::<f64>().map_err(|_| malformed(line, format!("bad coordinate {cell:?}")))?;
            }
            Some(BoundingBox::pixel(v[0], v[1], v[2], v[3]).map_err(|e| malformed(line, e.to_string()))?)
        };
        let source = Source::parse(&row[6]).ok_or_else(|| malformed(line, format!("bad source {:?}", &row[6])))?;
        records.push(ImageRecord { image_path, class_id, bbox, source, size: None });
    }
    Ok(records)
}

/// Serializes records in manifest format.
pub fn to_csv_string(records: &[ImageRecord]) -> String {
    let mut out = HEADER.join(",");
    out.push('\n');
    for r in records {
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let coords = match &r.bbox {
            Some(b) => b.to_array().map(|v| v.to_string()),
            None => Default::default(),
        };
        let class = r.class_id.index().to_string();
        let fields = [r.image_path.as_str(), class.as_str(), &coords[0], &coords[1], &coords[2], &coords[3], r.source.as_str()];
        writer.write_record(fields).expect("writing to memory");
        out.push_str(std::str::from_utf8(&writer.into_inner().expect("in-memory writer")).expect("utf-8 input"));
    }
    out
}

/// Reads and validates a manifest. Image sizes are probed from the files
/// that exist next to the manifest so boxes can be bounds-checked.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestIoError> {
    if !path.is_file() {
        return Err(ManifestIoError::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut records = parse_records(&text)?;
    for r in &mut records {
        r.size = probe_size(&root.join(&r.image_path));
    }
    Ok(DatasetManifest::new(records)?)
}

/// Width and height from the image header, when the file is readable.
pub fn probe_size(path: &Path) -> Option<ImageSize> {
    image::image_dimensions(path).ok().map(|(width, height)| ImageSize { width, height })
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

pub fn write_manifest(records: &[ImageRecord], path: &Path) -> io::Result<()> {
    write_atomic(path, to_csv_string(records).as_bytes())
}

/// Annotation rows of a store as manifest records. Deleted and pending
/// images have no row and are left out.
pub fn store_records(store: &AnnotationStore) -> Vec<ImageRecord> {
    store
        .rows()
        .iter()
        .map(|r| ImageRecord { image_path: r.image_path.clone(), class_id: r.class_id, bbox: Some(r.bbox), source: r.source, size: None })
        .collect()
}

pub fn export_csv(store: &AnnotationStore, path: &Path) -> io::Result<()> {
    write_manifest(&store_records(store), path)
}
