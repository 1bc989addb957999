//! Reverse-mode differentiation tape.
//!
//! Nodes are appended in execution order and backward walks them in exact
//! reverse order, so gradient accumulation order is fixed by the recording.
//! On an FP16E tape every primitive output (forward value and backward
//! contribution) is snapped to the binary16 grid; arithmetic inside a primitive
//! runs in `f32`. Scalar loss reductions stay in `f32`.

use crate::error::{Error, Result};
use crate::numerics::fp16::quantize_slice;
use crate::numerics::ops::{self, AttentionSpec};
use crate::numerics::tensor::{DType, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Input value; `param` links it to a canonical parameter slot.
    Leaf {
        param: Option<usize>,
    },
    /// `x . w + b` with `w` shaped `in x out`.
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// `x . w^T` with `w` shaped `out x in` (tied output projection).
    MatMulNT {
        x: Var,
        w: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    },
    /// Row lookup into `table`.
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
    },
    /// Scalar `sum(weights * x)`.
    WeightedSum {
        x: Var,
        weights: Vec<f32>,
    },
    /// Elementwise multiply by a fixed mask (already scaled by `1 / keep`).
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Linear { .. } => "linear",
            Op::MatMulNT { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Attention { .. } => "attention",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Dropout { .. } => "dropout",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Saved forward intermediates (layer-norm statistics, attention weights).
    aux: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Tape {
    dtype: DType,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            nodes: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Records a parameter leaf bound to canonical slot `slot`.
    pub fn param(&mut self, slot: usize, value: Tensor) -> Var {
        self.leaf(Some(slot), value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(None, value)
    }

    fn leaf(&mut self, param: Option<usize>, value: Tensor) -> Var {
        let value = value.into_dtype(self.dtype);
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param },
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.record(Op::Linear { x, w, b })
    }

    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        self.record(Op::MatMulNT { x, w })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        self.record(Op::Scale { x, factor })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Gelu { x })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        self.record(Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn embedding(&mut self, table: Var, ids: Vec<u32>) -> Result<Var> {
        self.record(Op::Embedding { table, ids })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Softmax { x })
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.record(Op::LogSoftmax { x })
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        self.record(Op::Attention { q, k, v, spec })
    }

    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        self.record(Op::WeightedSum { x, weights })
    }

    pub fn dropout(&mut self, x: Var, mask: Vec<f32>) -> Result<Var> {
        self.record(Op::Dropout { x, mask })
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let nodes = &self.nodes;
        let (value, aux) = evaluate(&op, |v| &nodes[v.0].value)?;
        let value = self.finish(&op, value);
        self.nodes.push(Node { value, op, aux });
        Ok(Var(self.nodes.len() - 1))
    }

    fn finish(&self, op: &Op, value: Tensor) -> Tensor {
        match (self.dtype, op) {
            (DType::F16E, Op::WeightedSum { .. }) => value,
            (dtype, _) => value.into_dtype(dtype),
        }
    }

    /// Re-executes every recorded primitive from the leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf { .. } => node.value.clone(),
                ref op => {
                    let (value, _) = evaluate(op, |v| &values[v.0])?;
                    self.finish(op, value)
                }
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Backpropagates from scalar `root`, seeding its gradient with `seed`.
    ///
    /// Nodes are visited in exact reverse recording order.
    pub fn backward(&self, root: Var, seed: f32) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![seed]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.node_backward(node, &g)?;
            grads[idx] = Some(g);
            for (input, mut contribution) in contributions {
                if self.dtype == DType::F16E {
                    quantize_slice(&mut contribution);
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += c;
                        }
                        if self.dtype == DType::F16E {
                            quantize_slice(acc);
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
                let dx = ops::matmul_nt(g, n, m, wv.data(), k);
                let dw = ops::matmul_tn(xv.data(), n, k, g, m);
                let mut v = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    v.push((*b, ops::column_sums(g, m)));
                }
                v
            }
            Op::MatMulNT { x, w } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
                let dx = ops::matmul(g, n, m, wv.data(), k);
                let dw = ops::matmul_tn(g, n, m, xv.data(), k);
                vec![(*x, dx), (*w, dw)]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|v| v * factor).collect())],
            Op::Gelu { x } => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| gv * ops::gelu_grad(xv))
                    .collect();
                vec![(*x, dx)]
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                let xv = val(*x);
                let gam = val(*gamma).data();
                let cols = xv.cols();
                let rows = xv.rows();
                let (means, rstds) = node.aux.split_at(rows);
                let mut dx = vec![0.0f32; xv.len()];
                let mut dgamma = vec![0.0f32; cols];
                let mut dbeta = vec![0.0f32; cols];
                let inv_n = 1.0 / cols as f32;
                let mut xhat = vec![0.0f32; cols];
                let mut dxhat = vec![0.0f32; cols];
                for r in 0..rows {
                    let row = xv.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        xhat[c] = (row[c] - means[r]) * rstds[r];
                        dxhat[c] = gr[c] * gam[c];
                        dgamma[c] += gr[c] * xhat[c];
                        dbeta[c] += gr[c];
                    }
                    let mean_d = dxhat.iter().fold(0.0f32, |a, v| a + v) * inv_n;
                    let mean_dx = dxhat.iter().zip(&xhat).fold(0.0f32, |a, (d, h)| a + d * h) * inv_n;
                    for c in 0..cols {
                        dx[r * cols + c] = rstds[r] * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let cols = tv.cols();
                let mut dt = vec![0.0f32; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for c in 0..cols {
                        dt[id * cols + c] += g[r * cols + c];
                    }
                }
                vec![(*table, dt)]
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let cols = y.cols();
                let mut dx = vec![0.0f32; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let s = yr.iter().zip(gr).fold(0.0f32, |a, (y, g)| a + y * g);
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - s);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LogSoftmax { x } => {
                let y = &node.value;
                let cols = y.cols();
                let mut dx = vec![0.0f32; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let s = gr.iter().fold(0.0f32, |a, v| a + v);
                    for c in 0..cols {
                        dx[r * cols + c] = gr[c] - yr[c].exp() * s;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Attention { q, k, v, spec } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (dq, dk, dv) =
                    ops::attention_backward(qv.data(), kv.data(), vv.data(), &node.aux, g, qv.cols(), spec);
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::WeightedSum { x, weights } => {
                let s = g[0];
                vec![(*x, weights.iter().map(|w| w * s).collect())]
            }
            Op::Dropout { x, mask } => vec![(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect())],
        };
        Ok(out)
    }

    /// Iterates parameter leaves as `(slot, var)`.
    pub fn param_leaves(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Leaf { param: Some(slot) } => Some((slot, Var(i))),
            _ => None,
        })
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &Op, detail: String) -> Error {
    Error::Shape(format!("{}: {detail}", op.name()))
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

/// Computes a primitive's output (unquantized) plus saved intermediates.
fn evaluate<'a>(op: &Op, value: impl Fn(Var) -> &'a Tensor) -> Result<(Tensor, Vec<f32>)> {
    let (out, aux) = match op {
        Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
        Op::Linear { x, w, b } => {
            let (xv, wv) = (value(*x), value(*w));
            if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
                return Err(shape_err(op, format!("{:?} . {:?}", xv.shape(), wv.shape())));
            }
            let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
            let mut y = ops::matmul(xv.data(), n, k, wv.data(), m);
            if let Some(b) = b {
                let bv = value(*b);
                if bv.len() != m {
                    return Err(shape_err(op, format!("bias {:?} for width {m}", bv.shape())));
                }
                ops::add_row_bias(&mut y, m, bv.data());
            }
            (Tensor::new(with_last(xv.shape(), m), y)?, vec![])
        }
        Op::MatMulNT { x, w } => {
            let (xv, wv) = (value(*x), value(*w));
            if wv.shape().len() != 2 || xv.cols() != wv.cols() {
                return Err(shape_err(op, format!("{:?} . {:?}^T", xv.shape(), wv.shape())));
            }
            let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
            let y = ops::matmul_nt(xv.data(), n, k, wv.data(), m);
            (Tensor::new(with_last(xv.shape(), m), y)?, vec![])
        }
        Op::Add { a, b } => {
            let (av, bv) = (value(*a), value(*b));
            if av.shape() != bv.shape() {
                return Err(shape_err(op, format!("{:?} + {:?}", av.shape(), bv.shape())));
            }
            let y = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            (Tensor::new(av.shape().to_vec(), y)?, vec![])
        }
        Op::Scale { x, factor } => {
            let xv = value(*x);
            let y = xv.data().iter().map(|v| v * factor).collect();
            (Tensor::new(xv.shape().to_vec(), y)?, vec![])
        }
        Op::Gelu { x } => {
            let xv = value(*x);
            let y = xv.data().iter().map(|&v| ops::gelu(v)).collect();
            (Tensor::new(xv.shape().to_vec(), y)?, vec![])
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (xv, gv, bv) = (value(*x), value(*gamma), value(*beta));
            let cols = xv.cols();
            if gv.len() != cols || bv.len() != cols {
                return Err(shape_err(
                    op,
                    format!("width {cols} vs {:?}/{:?}", gv.shape(), bv.shape()),
                ));
            }
            let (y, mut means, rstds) = ops::layer_norm(xv.data(), cols, gv.data(), bv.data(), *eps);
            means.extend(rstds);
            (Tensor::new(xv.shape().to_vec(), y)?, means)
        }
        Op::Embedding { table, ids } => {
            let tv = value(*table);
            let (rows, cols) = (tv.rows(), tv.cols());
            let mut y = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                let id = id as usize;
                if id >= rows {
                    return Err(Error::Bounds { index: id, len: rows });
                }
                y.extend_from_slice(tv.row(id));
            }
            (Tensor::new(vec![ids.len(), cols], y)?, vec![])
        }
        Op::Softmax { x } | Op::LogSoftmax { x } => {
            let xv = value(*x);
            let cols = xv.cols();
            let mut y = vec![0.0f32; xv.len()];
            for r in 0..xv.rows() {
                let out = &mut y[r * cols..(r + 1) * cols];
                if matches!(op, Op::Softmax { .. }) {
                    ops::softmax_row(xv.row(r), out);
                } else {
                    ops::log_softmax_row(xv.row(r), out);
                }
            }
            (Tensor::new(xv.shape().to_vec(), y)?, vec![])
        }
        Op::Attention { q, k, v, spec } => {
            let (qv, kv, vv) = (value(*q), value(*k), value(*v));
            let dim = qv.cols();
            if spec.heads == 0 || dim % spec.heads != 0 {
                return Err(shape_err(
                    op,
                    format!("width {dim} not divisible by {} heads", spec.heads),
                ));
            }
            if qv.rows() != spec.batch * spec.q_len
                || kv.rows() != spec.batch * spec.k_len
                || vv.rows() != spec.batch * spec.k_len
                || kv.cols() != dim
                || vv.cols() != dim
                || spec.key_lens.len() != spec.batch
            {
                return Err(shape_err(
                    op,
                    format!("q {:?} k {:?} v {:?} for {spec:?}", qv.shape(), kv.shape(), vv.shape()),
                ));
            }
            let (y, probs) = ops::attention_forward(qv.data(), kv.data(), vv.data(), dim, spec);
            (Tensor::new(qv.shape().to_vec(), y)?, probs)
        }
        Op::WeightedSum { x, weights } => {
            let xv = value(*x);
            if weights.len() != xv.len() {
                return Err(shape_err(
                    op,
                    format!("{} weights for {} values", weights.len(), xv.len()),
                ));
            }
            let s = xv
                .data()
                .iter()
                .zip(weights)
                .fold(0.0f32, |a, (x, w)| if *w == 0.0 { a } else { a + x * w });
            (Tensor::scalar(s), vec![])
        }
        Op::Dropout { x, mask } => {
            let xv = value(*x);
            if mask.len() != xv.len() {
                return Err(shape_err(op, format!("mask {} for {} values", mask.len(), xv.len())));
            }
            let y = xv.data().iter().zip(mask).map(|(x, m)| x * m).collect();
            (Tensor::new(xv.shape().to_vec(), y)?, vec![])
        }
    };
    Ok((out, aux))
}
