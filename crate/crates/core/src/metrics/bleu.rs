use std::collections::HashMap;
use std::hash::Hash;

use super::{ngram_counts, MetricError};

/// Treatment of zero n-gram precisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    /// A zero precision makes the whole score zero.
    None,
    /// A zero clipped count is replaced by half a count: `pₙ = 1 / (2·cand n-grams)`.
    #[default]
    HalfCount,
}

/// BLEU-4 against a single reference, with half-count smoothing.
pub fn bleu4<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Result<f64, MetricError> {
    bleu4_multi(candidate, &[reference], Smoothing::HalfCount)
}

/// BLEU-4 with clipping against the maximum count over all references and the
/// brevity penalty taken from the reference length closest to the candidate.
pub fn bleu4_multi<T: Eq + Hash>(
    candidate: &[T],
    references: &[&[T]],
    smoothing: Smoothing,
) -> Result<f64, MetricError> {
    if references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(MetricError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let total: usize = cand.values().sum();
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if clipped > 0 {
            clipped as f64 / total as f64
        } else {
            match smoothing {
                Smoothing::None => return Ok(0.0),
                Smoothing::HalfCount => 1.0 / (2.0 * total.max(1) as f64),
            }
        };
        log_sum += p.ln();
    }

    let c = candidate.len();
    // Closest reference length; ties go to the shorter one.
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap();
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * (log_sum / 4.0).exp())
}
