//! Multi-task loss: `λ_coord·L_coord + λ_text·L_text`.
//!
//! During training the coordinate error is measured in patch-grid units so it
//! sits on a scale comparable to the caption cross-entropy.

use thiserror::Error;

use crate::localization::PixelPoint;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("loss needs at least one sample")]
    Empty,
    #[error("non-finite loss input")]
    NonFinite,
    #[error("loss weights must be non-negative, finite and not both zero: ({0}, {1})")]
    BadWeights(f64, f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_coord: f64,
    pub lambda_text: f64,
}

impl LossWeights {
    pub fn new(lambda_coord: f64, lambda_text: f64) -> Result<Self> {
        let w = Self {
            lambda_coord,
            lambda_text,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_coord)
            || !ok(self.lambda_text)
            || self.lambda_coord + self.lambda_text == 0.0
        {
            return Err(ObjectiveError::BadWeights(
                self.lambda_coord,
                self.lambda_text,
            ));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_coord: 1.0,
            lambda_text: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub coord: f64,
    pub text: f64,
    pub total: f64,
}

/// `(1/N)·Σ ((x̂−x)² + (ŷ−y)²)`.
pub fn coord_loss(pred: &[PixelPoint], truth: &[PixelPoint]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(ObjectiveError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p.x - t.x).powi(2) + (p.y - t.y).powi(2))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Differentiable coordinate loss for an `N×2` node of `[x, y]` rows.
pub fn coord_loss_var(tape: &mut Tape, pred: Var, truth: &[PixelPoint]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "coord_loss",
            lhs: shape,
            rhs: vec![truth.len(), 2],
        }
        .into());
    }
    if shape[0] != truth.len() {
        return Err(ObjectiveError::LengthMismatch(shape[0], truth.len()));
    }
    if truth.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    let flat: Vec<f32> = truth
        .iter()
        .flat_map(|p| [p.x as f32, p.y as f32])
        .collect();
    let t = tape.constant(&Tensor::new(&shape, flat)?);
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / truth.len() as f64))
}

/// Mean token cross-entropy of one sequence.
pub fn text_loss_var(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    Ok(tape.cross_entropy(logits, targets)?)
}

/// Batch text loss: per-sequence mean cross-entropy, then the mean over sequences.
pub fn text_loss(batch: &[(Tensor, Vec<usize>)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    let mut total = 0.0;
    for (logits, targets) in batch {
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let ce = tape.cross_entropy(l, targets)?;
        total += tape.scalar(ce);
    }
    Ok(total / batch.len() as f64)
}

pub fn total_loss(coord: f64, text: f64, w: &LossWeights) -> Result<LossBreakdown> {
    if !coord.is_finite() || !text.is_finite() {
        return Err(ObjectiveError::NonFinite);
    }
    w.validate()?;
    Ok(LossBreakdown {
        coord,
        text,
        total: w.lambda_coord * coord + w.lambda_text * text,
    })
}

pub fn total_loss_var(tape: &mut Tape, coord: Var, text: Var, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let c = tape.scale(coord, w.lambda_coord);
    let t = tape.scale(text, w.lambda_text);
    Ok(tape.add(c, t)?)
}
