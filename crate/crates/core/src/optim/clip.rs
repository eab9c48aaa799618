use super::{OptimError, Result};

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scales every gradient by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the norm measured before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(OptimError::Config(format!(
            "max_norm {max_norm} must be positive"
        )));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(OptimError::NonFinite);
    }
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    Ok(norm)
}
