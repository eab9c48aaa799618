use std::hash::Hash;

use super::{f1, ngram_counts, MetricError};

/// ROUGE-N F1 over clipped n-gram overlap. Zero when either side has no n-grams.
pub fn rouge_n<T: Eq + Hash>(
    candidate: &[T],
    reference: &[T],
    n: usize,
) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::BadOrder(n));
    }
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refs.values().sum();
    if cand_total == 0 || ref_total == 0 {
        return Ok(0.0);
    }
    let overlap: usize = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    let precision = overlap as f64 / cand_total as f64;
    let recall = overlap as f64 / ref_total as f64;
    Ok(f1(precision, recall))
}

/// Length of the longest common subsequence, by the usual O(|a|·|b|) table
/// kept one row at a time.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1: `R = LCS/|ref|`, `P = LCS/|cand|`.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    f1(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn rouge_n_examples() {
        let s = toks("a b c d");
        assert_eq!(rouge_n(&s, &s, 1).unwrap(), 1.0);
        assert_eq!(rouge_n(&s, &s, 2).unwrap(), 1.0);
        assert_eq!(rouge_n(&toks("a b"), &toks("c d"), 1).unwrap(), 0.0);
        let r = rouge_n(&toks("a b c"), &toks("a c d"), 1).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_n(&toks("a"), &toks("a"), 2).unwrap(), 0.0);
        assert!(rouge_n(&s, &s, 0).is_err());
    }

    #[test]
    fn rouge_l_examples() {
        let s = toks("x y z");
        assert_eq!(rouge_l(&s, &s), 1.0);
        let r = rouge_l(&toks("a b c d"), &toks("a c d"));
        assert!((r - 6.0 / 7.0).abs() < 1e-12);
        let r = rouge_l(&toks("d c b a"), &toks("a b c d"));
        assert!((r - 0.25).abs() < 1e-12);
        assert_eq!(rouge_l::<&str>(&[], &s), 0.0);
    }

    #[test]
    fn lcs_basic() {
        assert_eq!(lcs_len(b"ABCBDAB", b"BDCABA"), 4);
        assert_eq!(lcs_len::<u8>(b"", b"abc"), 0);
    }
}
