//! Seven-way class probability vectors.

use alloc::vec::Vec;

use crate::loss::softmax;
use crate::taxonomy::{ClassId, NUM_CLASSES};

/// Tolerance on the probability sum.
pub const SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum ScoresError {
    #[error("expected {NUM_CLASSES} probabilities, got {0}")]
    WrongLength(usize),
    #[error("probability {0} of class {1} is outside [0, 1]")]
    OutOfRange(f64, usize),
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
}

/// `[class_1 : prob_1, ..., class_7 : prob_7]`, indexed by class id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    probs: [f64; NUM_CLASSES],
}

impl ClassScores {
    pub fn from_probabilities(probs: &[f64]) -> Result<Self, ScoresError> {
        if probs.len() != NUM_CLASSES {
            return Err(ScoresError::WrongLength(probs.len()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(ScoresError::OutOfRange(p, i));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(ScoresError::NotNormalized(sum));
        }
        let mut out = [0.0; NUM_CLASSES];
        out.copy_from_slice(probs);
        Ok(Self { probs: out })
    }

    /// Softmax of raw logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self, ScoresError> {
        if logits.len() != NUM_CLASSES {
            return Err(ScoresError::WrongLength(logits.len()));
        }
        Self::from_probabilities(&softmax(logits))
    }

    /// Probability one on `class`.
    pub fn one_hot(class: ClassId) -> Self {
        let mut probs = [0.0; NUM_CLASSES];
        probs[class.index()] = 1.0;
        Self { probs }
    }

    pub fn probabilities(&self) -> &[f64; NUM_CLASSES] {
        &self.probs
    }

    pub fn prob(&self, class: ClassId) -> f64 {
        self.probs[class.index()]
    }

    /// Most probable class; the lowest id wins ties.
    pub fn top(&self) -> (ClassId, f64) {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        (ClassId::from_index(best).expect("index below NUM_CLASSES"), self.probs[best])
    }

    /// `(class, prob)` pairs in descending probability order.
    pub fn ranked(&self) -> Vec<(ClassId, f64)> {
        let mut v: Vec<(ClassId, f64)> = ClassId::all().map(|c| (c, self.probs[c.index()])).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    /// `(class, prob)` pairs in class order.
    pub fn entries(&self) -> impl Iterator<Item = (ClassId, f64)> + '_ {
        ClassId::all().map(|c| (c, self.probs[c.index()]))
    }
}
