use super::tape::{Tape, Var};
use super::{Result, Tensor};
use crate::exec::Exec;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, shape: &[usize], values: Vec<f64>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf_f64(shape, values, false)?;
    let y = f(&mut tape, x)?;
    Ok(tape.scalar(y))
}

/// Maximum relative error between the tape gradient of scalar `f` at `x` and
/// central differences `(f(x+eps·eᵢ) − f(x−eps·eᵢ)) / (2·eps)`, over every component.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_indices(f, x, eps, &all, Exec::default())
}

/// Like [`grad_check`] but only probes the listed flat indices.
pub fn grad_check_indices<F>(
    f: F,
    x: &Tensor,
    eps: f64,
    indices: &[usize],
    exec: Exec,
) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut tape = Tape::new();
    let xv = tape.leaf_f64(x.shape(), base.clone(), true)?;
    let root = f(&mut tape, xv)?;
    let analytic = tape.backward(root)?.get_or_zeros(xv);

    let numeric = exec.map(indices, |&i| -> Result<f64> {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = eval(&f, x.shape(), plus)?;
        let fm = eval(&f, x.shape(), minus)?;
        Ok((fp - fm) / (2.0 * eps))
    });

    let mut worst = 0.0f64;
    for (&i, n) in indices.iter().zip(numeric) {
        worst = worst.max(relative_error(analytic[i], n?));
    }
    Ok(worst)
}
