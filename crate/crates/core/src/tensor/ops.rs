use super::tape::{Op, Tape, Var};
use super::{Result, TensorError};

pub(crate) const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_C: f64 = 0.044_715;

const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g[m×n] · bᵀ` where `b` is `k×n`.
pub(crate) fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = grow
                .iter()
                .zip(&b[p * n..(p + 1) * n])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub(crate) fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn rank2(tape: &Tape, op: &'static str, x: Var) -> Result<(usize, usize)> {
    match *tape.shape(x) {
        [r, c] => Ok((r, c)),
        ref s => Err(TensorError::InvalidAxis {
            op,
            axis: 1,
            rank: s.len(),
        }),
    }
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2(self, "matmul", a)?;
        let (k2, n) = rank2(self, "matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// `x[n×k] + bias[k]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rank2(self, "add_row", x)?;
        if self.shape(bias) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + s).collect();
        self.push(self.shape(x).to_vec(), out, Op::AddScalar(x))
    }

    /// GELU, tanh approximation. Chosen over ReLU because it is smooth everywhere,
    /// which keeps central-difference checks meaningful.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()))
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                msg: "non-positive input".into(),
            });
        }
        let out = self.value(x).iter().map(|v| v.ln()).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Log(x)))
    }

    /// Row-wise layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, cols) = rank2(self, "layer_norm", x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(self.value(x).len());
        let mut inv_std = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..cols {
                let h = (row[j] - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        super::check_shape(shape, self.value(x).len())?;
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rank2(self, "transpose", x)?;
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(x)))
    }

    /// Gathers rows of `table[V×d]` by id, producing `ids.len()×d`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = rank2(self, "embedding", table)?;
        if ids.is_empty() {
            return Err(TensorError::Empty { op: "embedding" });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                limit: rows,
            });
        }
        let t = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&i| t[i * cols..(i + 1) * cols].iter().copied())
            .collect();
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(x))
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| o * len * inner + a * inner + i;
                let max = (0..len)
                    .map(|a| v[idx(a)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (v[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[idx(a)] /= total;
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Mean token negative log-likelihood: `-(1/T) Σ_t log softmax(logits_t)[target_t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t_len, vocab) = rank2(self, "cross_entropy", logits)?;
        if targets.len() != t_len {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![t_len, vocab],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                limit: vocab,
            });
        }
        let v = self.value(logits);
        let mut probs = Vec::with_capacity(v.len());
        let mut loss = 0.0;
        for (row, &target) in v.chunks(vocab).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            loss -= row[target] - lse;
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        loss /= t_len as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Columns `start..start+width` of a rank-2 node.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = rank2(self, "slice_cols", x)?;
        if width == 0 || start + width > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + width,
                limit: cols,
            });
        }
        let v = self.value(x);
        let out = (0..rows)
            .flat_map(|r| {
                v[r * cols + start..r * cols + start + width]
                    .iter()
                    .copied()
            })
            .collect();
        Ok(self.push(vec![rows, width], out, Op::SliceCols { x, start }))
    }

    /// Stacks rank-2 nodes with equal widths along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or(TensorError::Empty { op: "concat_rows" })?;
        let (_, cols) = rank2(self, "concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = rank2(self, "concat_rows", p)?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let out = parts
            .iter()
            .flat_map(|&p| self.value(p).iter().copied())
            .collect();
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins rank-2 nodes with equal heights along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or(TensorError::Empty { op: "concat_cols" })?;
        let (rows, _) = rank2(self, "concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rank2(self, "concat_cols", p)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec())))
    }

    /// `out[i] = x.flat[indices[i]]`, shaped as `shape`. Repeated indices fan out.
    pub fn gather(&mut self, x: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
        super::check_shape(shape, indices.len())?;
        let v = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather",
                index: bad,
                limit: v.len(),
            });
        }
        let out = indices.iter().map(|&i| v[i]).collect();
        Ok(self.push(
            shape.to_vec(),
            out,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// `x / Σx` over all entries; the sum must be positive.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).iter().sum();
        if !(total > 0.0) {
            return Err(TensorError::Domain {
                op: "normalize",
                msg: format!("sum {total} is not positive"),
            });
        }
        let out = self.value(x).iter().map(|v| v / total).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Normalize { x, total }))
    }
}
