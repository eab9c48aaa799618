//! Caption and localization quality indicators.
//!
//! Text metrics are generic over the token type and depend only on token
//! equality, so they give the same answer on strings or on vocabulary ids.

mod bleu;
mod report;
mod rouge;

pub use bleu::{bleu4, bleu4_multi, Smoothing};
pub use report::{corpus_report, pixel_mse, EvalRecord, MetricsReport};
pub use rouge::{lcs_len, rouge_l, rouge_n};

use std::collections::HashMap;
use std::hash::Hash;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("length mismatch: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),
    #[error("no samples to score")]
    Empty,
    #[error("unsupported n-gram order {0}")]
    BadOrder(usize),
}

pub(crate) fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

pub(crate) fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}
