use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DataError;

/// Deterministic train/validation split. The validation size is
/// `round(n·val_fraction)` clamped so both sides are non-empty; each side
/// keeps the input order.
pub fn split<T: Clone>(
    samples: &[T],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::Split(format!(
            "val_fraction {val_fraction} must be in (0, 1)"
        )));
    }
    let n = samples.len();
    if n < 2 {
        return Err(DataError::Split(format!(
            "{n} samples cannot fill both splits"
        )));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (s, v) in samples.iter().zip(is_val) {
        if v { &mut val } else { &mut train }.push(s.clone());
    }
    Ok((train, val))
}
