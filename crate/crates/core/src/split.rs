//! Stratified train/validation/test splitting.
//!
//! Split sizes are `floor(f_train · N)` and `floor(f_val · N)` over the
//! whole corpus, with the test split taking the rest. Each class receives
//! the floor of its own share, and the leftover records are handed out one
//! at a time to the classes with the largest fractional remainders, so no
//! class deviates from its exact share by a full record.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::math::floor;
use crate::taxonomy::{ClassId, NUM_CLASSES};

// Absorbs representation error such as 0.29 * 100 = 28.999999999999996.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum SplitError {
    #[error("fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("nothing to split")]
    Empty,
    #[error("class {class} has {count} records but {splits} splits are non-empty")]
    ClassTooSmall { class: ClassId, count: usize, splits: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub seed: u64,
    fractions: [f64; 3],
}

impl SplitSpec {
    pub fn new(seed: u64, fractions: [f64; 3]) -> Result<Self, SplitError> {
        let sum: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(SplitError::BadFractions(fractions));
        }
        Ok(Self { seed, fractions })
    }

    /// 80% / 10% / 10%.
    pub fn classifier_default(seed: u64) -> Self {
        Self { seed, fractions: [0.8, 0.1, 0.1] }
    }

    /// 80% train, 20% test, no validation split.
    pub fn detector_default(seed: u64) -> Self {
        Self { seed, fractions: [0.8, 0.0, 0.2] }
    }

    pub fn fractions(&self) -> [f64; 3] {
        self.fractions
    }
}

/// Indices into the input of each split, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn floor_share(f: f64, n: usize) -> usize {
    floor(f * n as f64 + FLOOR_SLACK) as usize
}

/// Distributes `total` records across classes: floors first, then one extra
/// record per class in order of largest remainder (lower class id on ties),
/// never exceeding `capacity`.
fn allocate(total: usize, fraction: f64, sizes: &[usize], capacity: &[usize]) -> Vec<usize> {
    let mut take: Vec<usize> = sizes.iter().zip(capacity).map(|(&n, &cap)| floor_share(fraction, n).min(cap)).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    let remainder = |c: usize| fraction * sizes[c] as f64 - floor_share(fraction, sizes[c]) as f64;
    order.sort_by(|&a, &b| remainder(b).total_cmp(&remainder(a)).then(a.cmp(&b)));
    let mut missing = total.saturating_sub(take.iter().sum());
    while missing > 0 {
        let before = missing;
        for &c in &order {
            if missing == 0 {
                break;
            }
            if take[c] < capacity[c] && sizes[c] > 0 {
                take[c] += 1;
                missing -= 1;
            }
        }
        if before == missing {
            break;
        }
    }
    take
}

/// Splits records, given by their class ids, into train/val/test.
pub fn split_indices(classes: &[ClassId], spec: &SplitSpec) -> Result<SplitIndices, SplitError> {
    if classes.is_empty() {
        return Err(SplitError::Empty);
    }
    let [ft, fv, _] = spec.fractions;
    let splits = spec.fractions.iter().filter(|f| **f > 0.0).count();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, c) in classes.iter().enumerate() {
        members[c.index()].push(i);
    }
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    for (c, &n) in sizes.iter().enumerate() {
        if n > 0 && n < splits {
            return Err(SplitError::ClassTooSmall { class: ClassId::from_index(c).expect("class index"), count: n, splits });
        }
    }

    let n = classes.len();
    let train = allocate(floor_share(ft, n), ft, &sizes, &sizes);
    let left: Vec<usize> = sizes.iter().zip(&train).map(|(s, t)| s - t).collect();
    let val = allocate(floor_share(fv, n), fv, &sizes, &left);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = SplitIndices::default();
    for (c, idx) in members.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        let (t, rest) = idx.split_at(train[c]);
        let (v, te) = rest.split_at(val[c]);
        out.train.extend_from_slice(t);
        out.val.extend_from_slice(v);
        out.test.extend_from_slice(te);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}
