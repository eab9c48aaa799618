use super::ops::{matmul_a_bt, matmul_at_b, GELU_C, GELU_K};
use super::{check_shape, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Log(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Transpose(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Normalize {
        x: Var,
        total: f64,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a forward computation. Parents always precede children,
/// so a reverse sweep over node ids is a valid topological order.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient buffer per tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` requires grad and was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient buffer shaped like `v`; zeros if `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    /// Writes the gradient of `v` into `tensor.grad`.
    pub fn write_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        let g = self.get_or_zeros(v);
        tensor.set_grad(g.into_iter().map(|x| x as f32).collect())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite output from {op:?}"
        );
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = self
            .parents(&op)
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers `t` as a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| v as f64).collect();
        self.leaf_f64(t.shape(), value, t.requires_grad())
            .expect("tensor invariants guarantee a valid leaf")
    }

    /// Registers `t` as a leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| v as f64).collect();
        self.leaf_f64(t.shape(), value, false)
            .expect("tensor invariants guarantee a valid leaf")
    }

    pub fn leaf_f64(
        &mut self,
        shape: &[usize],
        value: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Var> {
        check_shape(shape, value.len())?;
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor> {
        let n = &self.nodes[v.0];
        Tensor::from_f64(&n.shape, &n.value)
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Gelu(x)
            | Op::Log(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Softmax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Normalize { x, .. }
            | Op::Gather { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
        }
    }

    /// Reverse sweep from a scalar `root`. Gradients accumulate additively across fan-out.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_shape = &self.nodes[root.0].shape;
        if root_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Only nodes that require grad carry meaningful buffers.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let shp = |v: Var| &self.nodes[v.0].shape;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, matmul_a_bt(g, val(*b), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, matmul_at_b(val(*a), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.nodes[bias.0].requires_grad {
                    let cols = shp(*bias)[0];
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Gelu(x) => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        let u = GELU_K * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let d = val(*x).iter().zip(g).map(|(x, g)| g / x).collect();
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = *shp(*x).last().unwrap();
                let gam = val(*gamma);
                let nf = cols as f64;
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for (r, ((grow, xrow), dxrow)) in g
                    .chunks(cols)
                    .zip(xhat.chunks(cols))
                    .zip(dx.chunks_mut(cols))
                    .enumerate()
                {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..cols {
                        let d = grow[j] * gam[j];
                        sum_d += d;
                        sum_dx += d * xrow[j];
                        dgamma[j] += grow[j] * xrow[j];
                        dbeta[j] += grow[j];
                    }
                    for j in 0..cols {
                        let d = grow[j] * gam[j];
                        dxrow[j] = inv_std[r] / nf * (nf * d - sum_d - xrow[j] * sum_dx);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Transpose(x) => {
                let (r, c) = (shp(*x)[0], shp(*x)[1]);
                let mut d = vec![0.0; g.len()];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Embedding { table, ids } => {
                if self.nodes[table.0].requires_grad {
                    let cols = shp(*table)[1];
                    let mut d = vec![0.0; val(*table).len()];
                    for (row, &id) in g.chunks(cols).zip(ids) {
                        d[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, *table, d);
                }
            }
            Op::Sum(x) => self.accumulate(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                let mut d = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |a: usize| o * len * inner + a * inner + i;
                        let dot: f64 = (0..*len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                        for a in 0..*len {
                            d[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = shp(*logits)[1];
                let scale = g[0] / targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (t, &target) in targets.iter().enumerate() {
                    d[t * vocab + target] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (shp(*x)[0], shp(*x)[1]);
                let width = node.shape[1];
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    self.accumulate(grads, *p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = shp(*p)[1];
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    self.accumulate(grads, *p, d);
                    offset += w;
                }
            }
            Op::Gather { x, indices } => {
                let mut d = vec![0.0; val(*x).len()];
                for (&i, &gv) in indices.iter().zip(g) {
                    d[i] += gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Normalize { x, total } => {
                let y = &node.value;
                let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                let d = g.iter().map(|g| (g - dot) / total).collect();
                self.accumulate(grads, *x, d);
            }
        }
    }
}
