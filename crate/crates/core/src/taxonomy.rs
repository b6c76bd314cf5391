//! The seven make-model classes and the reference corpus composition.

use core::fmt;

/// Number of make-model classes, including the catch-all "Other Class".
pub const NUM_CLASSES: usize = 7;

/// Id of the catch-all class covering every other make and model.
pub const OTHER_CLASS: ClassId = ClassId(6);

/// A validated class id in `0..NUM_CLASSES`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ClassId(u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("class id {0} is outside 0..{NUM_CLASSES}")]
pub struct UnknownClass(pub i64);

impl ClassId {
    pub const fn new(id: u8) -> Result<Self, UnknownClass> {
        if (id as usize) < NUM_CLASSES {
            Ok(Self(id))
        } else {
            Err(UnknownClass(id as i64))
        }
    }

    pub fn from_index(index: usize) -> Result<Self, UnknownClass> {
        if index < NUM_CLASSES {
            Ok(Self(index as u8))
        } else {
            Err(UnknownClass(index as i64))
        }
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    pub const fn index(self) -> usize {
        self.0 as usize
    }

    pub fn label(self) -> &'static ClassLabel {
        &CLASS_LABELS[self.index()]
    }

    /// All class ids in label order.
    pub fn all() -> impl Iterator<Item = ClassId> {
        (0..NUM_CLASSES as u8).map(ClassId)
    }
}

impl TryFrom<i64> for ClassId {
    type Error = UnknownClass;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        if (0..NUM_CLASSES as i64).contains(&value) {
            Ok(Self(value as u8))
        } else {
            Err(UnknownClass(value))
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassLabel {
    pub id: ClassId,
    pub make: &'static str,
    pub model: &'static str,
    pub display_name: &'static str,
}

/// Class labels in fixed id order. Confusion matrices are laid out in this order.
pub const CLASS_LABELS: [ClassLabel; NUM_CLASSES] = [
    ClassLabel { id: ClassId(0), make: "Volkswagen", model: "Passat", display_name: "VW. Passat" },
    ClassLabel { id: ClassId(1), make: "Renault", model: "Fluence", display_name: "Renault Fluence" },
    ClassLabel { id: ClassId(2), make: "Fiat", model: "Linea", display_name: "Fiat Linea" },
    ClassLabel { id: ClassId(3), make: "Volkswagen", model: "Polo", display_name: "VW. Polo" },
    ClassLabel { id: ClassId(4), make: "Renault", model: "Toros", display_name: "Renault Toros" },
    ClassLabel { id: ClassId(5), make: "Fiat", model: "Dogan", display_name: "Fiat Dogan" },
    ClassLabel { id: ClassId(6), make: "Other", model: "Other", display_name: "Other Class" },
];

/// One row of the reference corpus composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusRow {
    pub make: &'static str,
    pub model: &'static str,
    pub year: u16,
    pub feature: &'static str,
    pub images: usize,
}

/// Per-class image counts of the reference corpus, indexed by class id.
/// The last row aggregates [`OTHER_CLASS_MODELS`].
pub const CORPUS_DISTRIBUTION: [CorpusRow; NUM_CLASSES] = [
    CorpusRow { make: "Volkswagen", model: "Passat", year: 2015, feature: "1.6 TDi BlueMotion Comfortline", images: 4024 },
    CorpusRow { make: "Renault", model: "Fluence", year: 2016, feature: "1.5 dCi Touch", images: 4293 },
    CorpusRow { make: "Fiat", model: "Linea", year: 2013, feature: "1.3 Multijet Active Plus", images: 4234 },
    CorpusRow { make: "Volkswagen", model: "Polo", year: 1999, feature: "1.6", images: 3208 },
    CorpusRow { make: "Renault", model: "Toros", year: 2000, feature: "R12", images: 3783 },
    CorpusRow { make: "Fiat", model: "Dogan", year: 1996, feature: "SLX", images: 4183 },
    CorpusRow { make: "Other", model: "Other", year: 0, feature: "", images: 4162 },
];

/// Make-models pooled into the "Other Class".
pub const OTHER_CLASS_MODELS: [CorpusRow; 7] = [
    CorpusRow { make: "Toyota", model: "Corolla", year: 2016, feature: "1.4 D-4D Advance", images: 663 },
    CorpusRow { make: "Volvo", model: "S60", year: 2014, feature: "1.6 D Premium", images: 707 },
    CorpusRow { make: "Peugeot", model: "206", year: 2001, feature: "1.4 XR", images: 468 },
    CorpusRow { make: "Ford", model: "Focus", year: 2017, feature: "1.6 TDCi Trend X", images: 693 },
    CorpusRow { make: "Mercedes-Benz", model: "C", year: 2015, feature: "CLA 180d", images: 608 },
    CorpusRow { make: "Nissan", model: "Micra", year: 2016, feature: "1.2 Match", images: 533 },
    CorpusRow { make: "Audi", model: "A3 Sedan", year: 2017, feature: "1.6 TDI", images: 490 },
];

/// Total number of images in the reference corpus.
pub fn corpus_total() -> usize {
    CORPUS_DISTRIBUTION.iter().map(|r| r.images).sum()
}
