//! Attention map → hazard point.
//!
//! Inference uses the hard argmax of the aggregated last-layer attention.
//! Training uses a soft-argmax: the map is re-sharpened with
//! `softmax(log(A + ε) / τ)` and the expected grid coordinate is taken, which
//! keeps the coordinate loss differentiable. Grid coordinates map to pixels
//! through patch centers: `pixel = g·p + p/2`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Added inside the log of the soft-argmax so empty cells stay finite.
pub const SOFT_ARGMAX_EPS: f64 = 1e-8;
pub const DEFAULT_SHARPNESS: f64 = 0.5;

const MAP_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LocalizationError {
    #[error("attention map invalid: {0}")]
    InvalidMap(String),
    #[error("sharpness must be positive, got {0}")]
    BadSharpness(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] Box<ModelError>),
}

impl From<ModelError> for LocalizationError {
    fn from(e: ModelError) -> Self {
        LocalizationError::Model(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, LocalizationError>;

/// Continuous point in image pixels; `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_bounds(&self, size: usize) -> bool {
        let s = size as f64;
        (0.0..s).contains(&self.x) && (0.0..s).contains(&self.y)
    }
}

/// Continuous point in patch-grid units; `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
}

impl GridPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &GridPoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Discrete patch-grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridCell {
    pub gx: usize,
    pub gy: usize,
}

impl From<GridCell> for GridPoint {
    fn from(c: GridCell) -> Self {
        GridPoint::new(c.gx as f64, c.gy as f64)
    }
}

/// Non-negative attention mass over the patch grid, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    grid: Tensor,
}

impl AttentionMap {
    pub fn new(grid: Tensor) -> Result<Self> {
        if grid.rank() != 2 {
            return Err(LocalizationError::InvalidMap(format!(
                "expected a 2-d grid, got shape {:?}",
                grid.shape()
            )));
        }
        if grid.data().iter().any(|&v| v < 0.0) {
            return Err(LocalizationError::InvalidMap("negative entry".into()));
        }
        let total = grid.sum();
        if (total - 1.0).abs() > MAP_SUM_TOL {
            return Err(LocalizationError::InvalidMap(format!(
                "entries sum to {total}"
            )));
        }
        Ok(Self { grid })
    }

    /// Builds a map from arbitrary non-negative weights by dividing by their sum.
    pub fn from_weights(rows: usize, cols: usize, weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.len() != rows * cols || !(total > 0.0) || weights.iter().any(|&w| w < 0.0) {
            return Err(LocalizationError::InvalidMap(
                "weights must be non-negative, non-zero and match the grid".into(),
            ));
        }
        let grid = Tensor::from_fn(&[rows, cols], |i| (weights[i] / total) as f32)?;
        Self::new(grid)
    }

    pub fn rows(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn at(&self, gy: usize, gx: usize) -> f32 {
        self.grid.at2(gy, gx)
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }
}

/// How per-query attention rows collapse to one mass per key position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryMode {
    /// Mean over every query position.
    #[default]
    Mean,
    /// Use a single query row.
    Row(usize),
}

/// Mean over heads, then over queries (or one query row), renormalized and
/// reshaped to `rows×cols`. `per_head` is `h×n×n` with `n = rows·cols`.
pub fn aggregate_heads(
    per_head: &Tensor,
    rows: usize,
    cols: usize,
    query_mode: QueryMode,
) -> Result<AttentionMap> {
    let mut tape = Tape::new();
    let shape = per_head.shape();
    let n = rows * cols;
    if shape.len() != 3 || shape[1] != n || shape[2] != n {
        return Err(TensorError::ShapeMismatch {
            op: "aggregate_heads",
            lhs: shape.to_vec(),
            rhs: vec![shape.first().copied().unwrap_or(0), n, n],
        }
        .into());
    }
    let all = tape.constant(per_head);
    let heads: Vec<Var> = (0..shape[0])
        .map(|h| {
            let flat = tape.reshape(all, &[shape[0], n * n])?;
            let row = slice_row(&mut tape, flat, h)?;
            tape.reshape(row, &[n, n])
        })
        .collect::<std::result::Result<_, _>>()?;
    let map = aggregate_heads_var(&mut tape, &heads, rows, cols, query_mode)?;
    AttentionMap::new(tape.to_tensor(map)?)
}

fn slice_row(tape: &mut Tape, x: Var, row: usize) -> std::result::Result<Var, TensorError> {
    let cols = tape.shape(x)[1];
    let t = tape.transpose(x)?;
    let c = tape.slice_cols(t, row, 1)?;
    tape.reshape(c, &[1, cols])
}

/// Differentiable head/query aggregation on the tape. Each head is `n×n`.
pub fn aggregate_heads_var(
    tape: &mut Tape,
    heads: &[Var],
    rows: usize,
    cols: usize,
    query_mode: QueryMode,
) -> std::result::Result<Var, TensorError> {
    let first = *heads.first().ok_or(TensorError::Empty {
        op: "aggregate_heads",
    })?;
    let n = rows * cols;
    let mut acc = first;
    for &h in &heads[1..] {
        acc = tape.add(acc, h)?;
    }
    if tape.shape(acc) != [n, n] {
        return Err(TensorError::ShapeMismatch {
            op: "aggregate_heads",
            lhs: tape.shape(acc).to_vec(),
            rhs: vec![n, n],
        });
    }
    let mean_heads = tape.scale(acc, 1.0 / heads.len() as f64);
    let selector = match query_mode {
        QueryMode::Mean => Tensor::full(&[1, n], 1.0 / n as f32),
        QueryMode::Row(r) => {
            if r >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "aggregate_heads",
                    index: r,
                    limit: n,
                });
            }
            let mut t = Tensor::zeros(&[1, n]);
            t.data_mut()[r] = 1.0;
            t
        }
    };
    let sel = tape.constant(&selector);
    let per_key = tape.matmul(sel, mean_heads)?;
    let normalized = tape.normalize(per_key)?;
    tape.reshape(normalized, &[rows, cols])
}

/// Cell of the largest entry; ties go to the first row-major occurrence.
pub fn hard_argmax(map: &AttentionMap) -> GridCell {
    let data = map.grid.data();
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    GridCell {
        gx: best % map.cols(),
        gy: best / map.cols(),
    }
}

/// Expected grid coordinate under `softmax(log(A + ε) / τ)`.
pub fn soft_argmax(map: &AttentionMap, sharpness: f64) -> Result<GridPoint> {
    let mut tape = Tape::new();
    let a = tape.constant(&map.grid);
    let p = soft_argmax_var(&mut tape, a, sharpness)?;
    let v = tape.value(p);
    Ok(GridPoint::new(v[0], v[1]))
}

/// Differentiable soft-argmax of a `rows×cols` map node. Returns a `1×2` node `[x, y]`.
pub fn soft_argmax_var(tape: &mut Tape, map: Var, sharpness: f64) -> Result<Var> {
    if !(sharpness > 0.0) || !sharpness.is_finite() {
        return Err(LocalizationError::BadSharpness(sharpness));
    }
    let (rows, cols) = match *tape.shape(map) {
        [r, c] => (r, c),
        ref s => {
            return Err(LocalizationError::InvalidMap(format!(
                "expected a 2-d grid, got shape {s:?}"
            )))
        }
    };
    let n = rows * cols;
    let flat = tape.reshape(map, &[1, n])?;
    let shifted = tape.add_scalar(flat, SOFT_ARGMAX_EPS);
    let logs = tape.log(shifted)?;
    let sharpened = tape.scale(logs, 1.0 / sharpness);
    let probs = tape.softmax(sharpened, 1)?;
    let coords = Tensor::from_fn(&[n, 2], |i| {
        let cell = i / 2;
        if i % 2 == 0 {
            (cell % cols) as f32
        } else {
            (cell / cols) as f32
        }
    })?;
    let c = tape.constant(&coords);
    Ok(tape.matmul(probs, c)?)
}

/// Patch-center convention `g·p + p/2`, clamped to `[0, S−1]`.
pub fn grid_to_pixel(g: GridPoint, patch_size: usize, image_size: usize) -> PixelPoint {
    let p = patch_size as f64;
    let hi = image_size.saturating_sub(1) as f64;
    PixelPoint::new(
        (g.x * p + p / 2.0).clamp(0.0, hi),
        (g.y * p + p / 2.0).clamp(0.0, hi),
    )
}

/// Inverse of the patch-center convention (no clamping).
pub fn pixel_to_grid(px: PixelPoint, patch_size: usize) -> GridPoint {
    let p = patch_size as f64;
    GridPoint::new((px.x - p / 2.0) / p, (px.y - p / 2.0) / p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Soft-argmax with gradients available through [`hazard_point_var`].
    Train,
    /// Hard argmax.
    Infer,
}

/// Predicted hazard pixel for one image.
pub fn predict_hazard(model: &Model, image: &Tensor, mode: PredictMode) -> Result<PixelPoint> {
    let map = model.attention_map(image)?;
    let cfg = model.config();
    let grid = match mode {
        PredictMode::Infer => GridPoint::from(hard_argmax(&map)),
        PredictMode::Train => soft_argmax(&map, model.sharpness())?,
    };
    Ok(grid_to_pixel(grid, cfg.patch_size, cfg.image_size))
}

/// Train-mode prediction in grid units as a `1×2` tape node, from an attention
/// map node produced by the model's vision encoder.
pub fn hazard_point_var(tape: &mut Tape, attention: Var, sharpness: f64) -> Result<Var> {
    soft_argmax_var(tape, attention, sharpness)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(rows: usize, cols: usize, w: &[f64]) -> AttentionMap {
        AttentionMap::from_weights(rows, cols, w).unwrap()
    }

    fn one_hot(rows: usize, cols: usize, gx: usize, gy: usize) -> AttentionMap {
        let mut w = vec![0.0; rows * cols];
        w[gy * cols + gx] = 1.0;
        map(rows, cols, &w)
    }

    #[test]
    fn map_validation() {
        assert!(AttentionMap::new(Tensor::new(&[1, 2], vec![0.5, 0.6]).unwrap()).is_err());
        assert!(AttentionMap::new(Tensor::new(&[1, 2], vec![1.5, -0.5]).unwrap()).is_err());
        assert!(AttentionMap::new(Tensor::new(&[2], vec![0.5, 0.5]).unwrap()).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let single = Tensor::new(&[1, 1, 1], vec![1.0]).unwrap();
        let m = aggregate_heads(&single, 1, 1, QueryMode::Mean).unwrap();
        assert_eq!(m.grid().data(), &[1.0]);

        // Two heads over a 1×2 grid: rows of M are [1,0],[1,0]; N is [0,1],[0.5,0.5].
        let two = Tensor::new(&[2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let m = aggregate_heads(&two, 1, 2, QueryMode::Mean).unwrap();
        // (M+N)/2 = [[.5,.5],[.75,.25]]; mean over queries = [.625,.375].
        assert!((m.at(0, 0) - 0.625).abs() < 1e-7);
        assert!((m.at(0, 1) - 0.375).abs() < 1e-7);

        let uniform = Tensor::full(&[3, 4, 4], 0.25);
        let m = aggregate_heads(&uniform, 2, 2, QueryMode::Mean).unwrap();
        assert!(m.grid().data().iter().all(|&v| (v - 0.25).abs() < 1e-7));

        let m = aggregate_heads(&two, 1, 2, QueryMode::Row(1)).unwrap();
        assert!((m.at(0, 0) - 0.75).abs() < 1e-7);
        assert!(aggregate_heads(&two, 2, 2, QueryMode::Mean).is_err());
    }

    #[test]
    fn hard_argmax_examples() {
        assert_eq!(hard_argmax(&one_hot(4, 4, 2, 1)), GridCell { gx: 2, gy: 1 });
        assert_eq!(
            hard_argmax(&map(3, 3, &[1.0; 9])),
            GridCell { gx: 0, gy: 0 }
        );
        assert_eq!(
            hard_argmax(&map(2, 2, &[0.1, 0.2, 0.3, 0.4])),
            GridCell { gx: 1, gy: 1 }
        );
    }

    #[test]
    fn soft_argmax_examples() {
        for tau in [0.01, 0.1, 0.5] {
            let p = soft_argmax(&one_hot(4, 4, 2, 1), tau).unwrap();
            assert!((p.x - 2.0).abs() < 1e-9 && (p.y - 1.0).abs() < 1e-9);
        }
        // The ε floor leaks ε^(1/τ) per empty cell, visible only at large τ.
        let p = soft_argmax(&one_hot(4, 4, 2, 1), 3.0).unwrap();
        assert!((p.x - 2.0).abs() < 0.05 && (p.y - 1.0).abs() < 0.05);
        let p = soft_argmax(&map(4, 4, &[1.0; 16]), 0.5).unwrap();
        assert!((p.x - 1.5).abs() < 1e-9 && (p.y - 1.5).abs() < 1e-9);
        let mut w = vec![0.0; 16];
        w[0] = 1.0;
        w[15] = 1.0;
        let p = soft_argmax(&map(4, 4, &w), 0.5).unwrap();
        assert!((p.x - 1.5).abs() < 1e-9 && (p.y - 1.5).abs() < 1e-9);
        assert!(matches!(
            soft_argmax(&map(1, 1, &[1.0]), 0.0),
            Err(LocalizationError::BadSharpness(_))
        ));
    }

    #[test]
    fn grid_to_pixel_examples() {
        assert_eq!(
            grid_to_pixel(GridPoint::new(0.0, 0.0), 8, 32),
            PixelPoint::new(4.0, 4.0)
        );
        assert_eq!(
            grid_to_pixel(GridPoint::new(1.5, 1.5), 8, 32),
            PixelPoint::new(16.0, 16.0)
        );
        let p = grid_to_pixel(GridPoint::new(3.9, 3.9), 8, 32);
        assert!(p.in_bounds(32));
        assert_eq!(p, PixelPoint::new(31.0, 31.0));
        let g = pixel_to_grid(PixelPoint::new(20.0, 28.0), 8);
        assert_eq!(g, GridPoint::new(2.0, 3.0));
    }

    fn unique_max_map() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            (
                Just(r),
                Just(c),
                prop::collection::vec(0.0f64..1.0, r * c),
                0..r * c,
            )
                .prop_map(|(r, c, mut w, peak)| {
                    // Leave a clear margin above the runner-up.
                    let top = w.iter().cloned().fold(0.0, f64::max);
                    w[peak] = top / 0.8 + 0.05;
                    (r, c, w)
                })
        })
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_monotone_maps(w in prop::collection::vec(0.01f64..1.0, 12)) {
            let a = map(3, 4, &w);
            let exp: Vec<f64> = w.iter().map(|v| (3.0 * v).exp()).collect();
            let sq: Vec<f64> = w.iter().map(|v| v * v * 5.0).collect();
            prop_assert_eq!(hard_argmax(&a), hard_argmax(&map(3, 4, &exp)));
            prop_assert_eq!(hard_argmax(&a), hard_argmax(&map(3, 4, &sq)));
        }

        #[test]
        fn soft_argmax_within_hull((r, c, w) in unique_max_map(), tau in 0.01f64..5.0) {
            let p = soft_argmax(&map(r, c, &w), tau).unwrap();
            prop_assert!(p.x >= -1e-9 && p.x <= (c - 1) as f64 + 1e-9);
            prop_assert!(p.y >= -1e-9 && p.y <= (r - 1) as f64 + 1e-9);
        }

        #[test]
        fn soft_argmax_converges_as_sharpness_drops((r, c, w) in unique_max_map()) {
            let a = map(r, c, &w);
            let hard = GridPoint::from(hard_argmax(&a));
            let d: Vec<f64> = [1.0, 0.1, 0.01]
                .iter()
                .map(|&t| soft_argmax(&a, t).unwrap().distance(&hard))
                .collect();
            // Off-peak pulls can cancel, so only the endpoints are ordered.
            prop_assert!(d[2] <= d[0] + 1e-9, "{:?}", d);
            prop_assert!(d[2] < 0.5);
            let peak = |t: f64| {
                let logits: Vec<f64> = w.iter().map(|v| (v + SOFT_ARGMAX_EPS).ln() / t).collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                1.0 / logits.iter().map(|l| (l - m).exp()).sum::<f64>()
            };
            prop_assert!(peak(1.0) <= peak(0.1) + 1e-12 && peak(0.1) <= peak(0.01) + 1e-12);
        }

        #[test]
        fn center_lands_in_its_patch(w in prop::collection::vec(0.0f64..1.0, 16), p in 1usize..12) {
            prop_assume!(w.iter().sum::<f64>() > 0.0);
            let a = map(4, 4, &w);
            let cell = hard_argmax(&a);
            let px = grid_to_pixel(cell.into(), p, 4 * p);
            prop_assert!(px.x >= (cell.gx * p) as f64 && px.x < ((cell.gx + 1) * p) as f64);
            prop_assert!(px.y >= (cell.gy * p) as f64 && px.y < ((cell.gy + 1) * p) as f64);
        }
    }
}
