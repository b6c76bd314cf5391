//! Labeled image records and manifests.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::geometry::BoundingBox;
use crate::taxonomy::{ClassId, NUM_CLASSES};

/// Who produced a record's box and label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Auto,
    Human,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Auto => "auto",
            Source::Human => "human",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "auto" => Some(Source::Auto),
            "human" => Some(Source::Human),
            _ => None,
        }
    }
}

/// Image dimensions in pixels, both positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// Path relative to the manifest location.
    pub image_path: String,
    pub class_id: ClassId,
    /// Pixel-space vehicle box.
    pub bbox: Option<BoundingBox>,
    pub source: Source,
    /// Known once the image header has been read.
    pub size: Option<ImageSize>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ManifestError {
    #[error("duplicate image path {0:?}")]
    DuplicatePath(String),
    #[error("box of {0:?} lies outside its {1}x{2} image")]
    BoxOutOfBounds(String, u32, u32),
    #[error("box of {0:?} must be in pixel coordinates")]
    BoxNotPixel(String),
    #[error("image {0:?} has a zero dimension")]
    EmptyImage(String),
}

/// Validated record list with its class histogram.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
    class_counts: [usize; NUM_CLASSES],
}

impl DatasetManifest {
    /// Validates `records` and recomputes the class histogram.
    pub fn new(records: Vec<ImageRecord>) -> Result<Self, ManifestError> {
        let mut seen = BTreeSet::new();
        let mut class_counts = [0usize; NUM_CLASSES];
        for r in &records {
            if !seen.insert(r.image_path.as_str()) {
                return Err(ManifestError::DuplicatePath(r.image_path.clone()));
            }
            if let Some(size) = r.size {
                if size.width == 0 || size.height == 0 {
                    return Err(ManifestError::EmptyImage(r.image_path.clone()));
                }
            }
            if let Some(b) = &r.bbox {
                if b.coords() != crate::geometry::Coords::Pixel {
                    return Err(ManifestError::BoxNotPixel(r.image_path.clone()));
                }
                let (w, h) = r.size.map_or((f64::INFINITY, f64::INFINITY), |s| (s.width as f64, s.height as f64));
                if !b.lies_within(w, h) {
                    let s = r.size.unwrap_or(ImageSize { width: 0, height: 0 });
                    return Err(ManifestError::BoxOutOfBounds(r.image_path.clone(), s.width, s.height));
                }
            }
            class_counts[r.class_id.index()] += 1;
        }
        Ok(Self { records, class_counts })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ImageRecord> {
        self.records
    }

    pub fn class_counts(&self) -> &[usize; NUM_CLASSES] {
        &self.class_counts
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// True when every record carries a box.
    pub fn has_all_boxes(&self) -> bool {
        self.records.iter().all(|r| r.bbox.is_some())
    }

    /// Sub-manifest of the records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let records: Vec<ImageRecord> = indices.iter().map(|&i| self.records[i].clone()).collect();
        let mut class_counts = [0usize; NUM_CLASSES];
        for r in &records {
            class_counts[r.class_id.index()] += 1;
        }
        Self { records, class_counts }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn rec(path: &str, class: u8) -> ImageRecord {
        ImageRecord { image_path: path.into(), class_id: ClassId::new(class).unwrap(), bbox: None, source: Source::Human, size: None }
    }

    #[test]
    fn counts_are_recomputed() {
        let m = DatasetManifest::new(vec![rec("a", 0), rec("b", 0), rec("c", 6)]).unwrap();
        assert_eq!(m.class_counts(), &[2, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let e = DatasetManifest::new(vec![rec("a", 0), rec("a", 1)]).unwrap_err();
        assert_eq!(e, ManifestError::DuplicatePath("a".into()));
    }

    #[test]
    fn box_must_fit_known_image() {
        let mut r = rec("a", 0);
        r.size = Some(ImageSize { width: 10, height: 10 });
        r.bbox = Some(BoundingBox::pixel(0.0, 0.0, 10.0, 11.0).unwrap());
        assert!(matches!(DatasetManifest::new(vec![r.clone()]), Err(ManifestError::BoxOutOfBounds(..))));
        r.bbox = Some(BoundingBox::pixel(0.0, 0.0, 10.0, 10.0).unwrap());
        assert!(DatasetManifest::new(vec![r]).is_ok());
    }

    #[test]
    fn paper_scale_histogram() {
        let counts = crate::taxonomy::CORPUS_DISTRIBUTION.map(|r| r.images);
        let mut records = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                records.push(rec(&format!("{c}/{i}.jpg"), c as u8));
            }
        }
        let m = DatasetManifest::new(records).unwrap();
        assert_eq!(m.class_counts()[0], 4024);
        assert_eq!(m.len(), 27887);
    }
}
