//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and the
//! information its backward rule needs. Nodes only reference earlier nodes,
//! so walking the tape backwards is a valid reverse topological order.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, dot};
use super::tensor::{numel_of, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    AddRow {
        x: usize,
        bias: usize,
        cols: usize,
    },
    AddScalar {
        x: usize,
        s: usize,
    },
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    MatVec {
        a: usize,
        w: usize,
        cols: usize,
    },
    /// Elementwise map with the local derivative saved at forward time.
    Unary {
        x: usize,
        deriv: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cols: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: usize,
        cols: usize,
    },
    AttnScores {
        q: usize,
        k: usize,
        dims: AttnDims,
        scale: f64,
    },
    AttnContext {
        p: usize,
        v: usize,
        dims: AttnDims,
    },
    Outer {
        a: usize,
        b: usize,
    },
    Gather {
        table: usize,
        rows: Vec<usize>,
        cols: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
        classes: usize,
    },
    Sum(usize),
}

/// Batch geometry for multi-head attention over a flattened `[batch·seq × d]`
/// activation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Records primitive applications for one forward pass.
///
/// Leaves borrow their data from the source [`Tensor`], so a tape over a
/// frozen model does not copy its weights.
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `tensor` as a leaf. Gradients are tracked iff the tensor
    /// requires them.
    pub fn leaf(&mut self, tensor: &'a Tensor) -> Var {
        self.push_node(Node {
            value: Cow::Borrowed(tensor.data()),
            shape: tensor.shape().to_vec(),
            requires_grad: tensor.requires_grad(),
            op: Op::Leaf,
        })
    }

    /// Records an owned leaf.
    pub fn input(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape(
                "input",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        Ok(self.push_node(Node {
            value: Cow::Owned(data),
            shape: shape.to_vec(),
            requires_grad,
            op: Op::Leaf,
        }))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = self.node(v);
        Tensor::new(&node.shape, node.value.to_vec()).expect("tape nodes hold consistent shapes")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let node = self.node(v);
        if node.value.len() != 1 {
            return Err(Error::shape("scalar", format!("{:?} is not a scalar", node.shape)));
        }
        Ok(node.value[0])
    }

    fn node(&self, v: Var) -> &Node<'a> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index]
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    fn push_node(&mut self, node: Node<'a>) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>, inputs: &[usize], op: Op) -> Result<Var> {
        if !value.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        debug_assert_eq!(numel_of(&shape), value.len());
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_node(Node {
            value: Cow::Owned(value),
            shape,
            requires_grad,
            op,
        }))
    }

    fn matrix_dims(&self, op: &'static str, i: usize) -> Result<(usize, usize)> {
        match self.nodes[i].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn vector_len(&self, op: &'static str, i: usize) -> Result<usize> {
        match self.nodes[i].shape.as_slice() {
            [n] => Ok(*n),
            s => Err(Error::shape(op, format!("expected a vector, got {s:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        let value = self.nodes[a].value.iter().zip(self.nodes[b].value.iter()).map(|(x, y)| x + y).collect();
        let shape = self.nodes[a].shape.clone();
        self.push("add", shape, value, &[a, b], Op::Add(a, b))
    }

    /// `x[r×c] + bias[c]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (x, bias) = (self.idx(x)?, self.idx(bias)?);
        let (_, cols) = self.matrix_dims("add_row", x)?;
        if self.vector_len("add_row", bias)? != cols {
            return Err(Error::shape("add_row", format!("bias {:?} for {cols} columns", self.nodes[bias].shape)));
        }
        let b = &self.nodes[bias].value;
        let value = self.nodes[x].value.chunks(cols).flat_map(|row| row.iter().zip(b.iter()).map(|(u, v)| u + v)).collect();
        let shape = self.nodes[x].shape.clone();
        self.push("add_row", shape, value, &[x, bias], Op::AddRow { x, bias, cols })
    }

    /// Adds a scalar variable to every entry of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (x, s) = (self.idx(x)?, self.idx(s)?);
        if self.nodes[s].value.len() != 1 {
            return Err(Error::shape("add_scalar", format!("{:?} is not a scalar", self.nodes[s].shape)));
        }
        let c = self.nodes[s].value[0];
        let value = self.nodes[x].value.iter().map(|u| u + c).collect();
        let shape = self.nodes[x].shape.clone();
        self.push("add_scalar", shape, value, &[x, s], Op::AddScalar { x, s })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        let value = self.nodes[a].value.iter().zip(self.nodes[b].value.iter()).map(|(x, y)| x * y).collect();
        let shape = self.nodes[a].shape.clone();
        self.push("mul", shape, value, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let x = self.idx(x)?;
        let value = self.nodes[x].value.iter().map(|u| u * c).collect();
        let shape = self.nodes[x].shape.clone();
        self.push("scale", shape, value, &[x], Op::Scale(x, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}×{k}]·[{k2}×{n}]")));
        }
        let value = kernels::matmul(&self.nodes[a].value, &self.nodes[b].value, m, k, n);
        self.push("matmul", vec![m, n], value, &[a, b], Op::MatMul { a, b, m, k, n })
    }

    /// `a[r×c] · w[c] -> [r]`
    pub fn matvec(&mut self, a: Var, w: Var) -> Result<Var> {
        let (a, w) = (self.idx(a)?, self.idx(w)?);
        let (rows, cols) = self.matrix_dims("matvec", a)?;
        if self.vector_len("matvec", w)? != cols {
            return Err(Error::shape("matvec", format!("[{rows}×{cols}]·{:?}", self.nodes[w].shape)));
        }
        let wv = &self.nodes[w].value;
        let value = self.nodes[a].value.chunks(cols).map(|row| dot(row, wv)).collect();
        self.push("matvec", vec![rows], value, &[a, w], Op::MatVec { a, w, cols })
    }

    /// Applies `f`, which returns `(value, derivative)`, elementwise.
    pub fn unary(&mut self, name: &str, x: Var, f: impl Fn(f64) -> (f64, f64)) -> Result<Var> {
        self.unary_indexed(name, x, |_, u| f(u))
    }

    /// Like [`Tape::unary`], with the flat element index passed to `f`.
    pub fn unary_indexed(&mut self, name: &str, x: Var, f: impl Fn(usize, f64) -> (f64, f64)) -> Result<Var> {
        let x = self.idx(x)?;
        let (value, deriv): (Vec<f64>, Vec<f64>) =
            self.nodes[x].value.iter().enumerate().map(|(i, &u)| f(i, u)).unzip();
        if !deriv.iter().all(|d| d.is_finite()) {
            return Err(Error::NonFinite(format!("{name} derivative")));
        }
        let shape = self.nodes[x].shape.clone();
        self.push(name, shape, value, &[x], Op::Unary { x, deriv })
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, kernels::gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, |u| {
            let s = kernels::sigmoid(u);
            (s, s * (1.0 - s))
        })
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (x, gamma, beta) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        if !(eps >= 0.0) {
            return Err(Error::InvalidArgument(format!("layer_norm eps {eps} must be non-negative")));
        }
        let cols = *self.nodes[x]
            .shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[p].shape != [cols] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} {:?} for last extent {cols}", self.nodes[p].shape),
                ));
            }
        }
        let rows = self.nodes[x].value.len() / cols;
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut value = vec![0.0; rows * cols];
        let (g, b) = (&self.nodes[gamma].value, &self.nodes[beta].value);
        for (r, row) in self.nodes[x].value.chunks(cols).enumerate() {
            let constant = row.iter().all(|&u| u == row[0]);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = if constant {
                0.0
            } else {
                row.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / cols as f64
            };
            let s = 1.0 / (var + eps).sqrt();
            if !s.is_finite() {
                return Err(Error::NonFinite("layer_norm (zero variance with eps = 0)".into()));
            }
            inv_std[r] = s;
            for c in 0..cols {
                // a constant row normalizes to exactly zero
                let h = if constant { 0.0 } else { (row[c] - mean) * s };
                xhat[r * cols + c] = h;
                value[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.nodes[x].shape.clone();
        self.push(
            "layer_norm",
            shape,
            value,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            },
        )
    }

    /// Masked softmax over the last extent of a matrix. `mask` has one entry
    /// per column; masked columns get probability exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let rows = self.matrix_dims("softmax_rows", self.idx(x)?)?.0;
        self.softmax_grouped(x, mask, rows)
    }

    /// Masked softmax where consecutive blocks of `rows_per_group` rows share
    /// one row of `mask` (shape `[groups × cols]`).
    pub fn softmax_grouped(&mut self, x: Var, mask: &[f64], rows_per_group: usize) -> Result<Var> {
        let x = self.idx(x)?;
        let (rows, cols) = self.matrix_dims("softmax_rows", x)?;
        if rows_per_group == 0 || rows % rows_per_group != 0 || mask.len() != (rows / rows_per_group) * cols {
            return Err(Error::shape(
                "softmax_rows",
                format!("mask of {} for [{rows}×{cols}] in groups of {rows_per_group}", mask.len()),
            ));
        }
        let mut value = vec![0.0; rows * cols];
        for (r, row) in self.nodes[x].value.chunks(cols).enumerate() {
            let m = &mask[(r / rows_per_group) * cols..][..cols];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k != 0.0)
                .map(|(&u, _)| u)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument(format!("softmax row {r} is fully masked")));
            }
            let out = &mut value[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for c in 0..cols {
                if m[c] != 0.0 {
                    out[c] = (row[c] - max).exp();
                    total += out[c];
                }
            }
            out.iter_mut().for_each(|o| *o /= total);
        }
        self.push("softmax_rows", vec![rows, cols], value, &[x], Op::Softmax { x, cols })
    }

    /// Scaled dot-product scores per example and head:
    /// output row `(b, h, i)` holds `scale · q_{b,i,h} · k_{b,j,h}` over keys `j`.
    pub fn attn_scores(&mut self, q: Var, k: Var, dims: AttnDims) -> Result<Var> {
        let (q, k) = (self.idx(q)?, self.idx(k)?);
        let d = dims.model_dim();
        for i in [q, k] {
            if self.nodes[i].shape != [dims.batch * dims.seq, d] {
                return Err(Error::shape("attn_scores", format!("{:?} for {dims:?}", self.nodes[i].shape)));
            }
        }
        let scale = 1.0 / (dims.head_dim as f64).sqrt();
        let (qv, kv) = (&self.nodes[q].value, &self.nodes[k].value);
        let AttnDims { batch, seq, heads, head_dim } = dims;
        let mut value = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + h * head_dim..][..head_dim];
                    let out = &mut value[((b * heads + h) * seq + i) * seq..][..seq];
                    for (j, o) in out.iter_mut().enumerate() {
                        *o = scale * dot(qi, &kv[(b * seq + j) * d + h * head_dim..][..head_dim]);
                    }
                }
            }
        }
        self.push(
            "attn_scores",
            vec![batch * heads * seq, seq],
            value,
            &[q, k],
            Op::AttnScores { q, k, dims, scale },
        )
    }

    /// Mixes values with attention probabilities, merging heads back into
    /// `[batch·seq × d]`.
    pub fn attn_context(&mut self, p: Var, v: Var, dims: AttnDims) -> Result<Var> {
        let (p, v) = (self.idx(p)?, self.idx(v)?);
        let AttnDims { batch, seq, heads, head_dim } = dims;
        let d = dims.model_dim();
        if self.nodes[p].shape != [batch * heads * seq, seq] || self.nodes[v].shape != [batch * seq, d] {
            return Err(Error::shape(
                "attn_context",
                format!("{:?}, {:?} for {dims:?}", self.nodes[p].shape, self.nodes[v].shape),
            ));
        }
        let (pv, vv) = (&self.nodes[p].value, &self.nodes[v].value);
        let mut value = vec![0.0; batch * seq * d];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let prow = &pv[((b * heads + h) * seq + i) * seq..][..seq];
                    let out = &mut value[(b * seq + i) * d + h * head_dim..][..head_dim];
                    for (j, &pij) in prow.iter().enumerate() {
                        let vj = &vv[(b * seq + j) * d + h * head_dim..][..head_dim];
                        out.iter_mut().zip(vj).for_each(|(o, x)| *o += pij * x);
                    }
                }
            }
        }
        self.push("attn_context", vec![batch * seq, d], value, &[p, v], Op::AttnContext { p, v, dims })
    }

    /// `out[i,j] = a[i] · b[j]`
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let r = self.vector_len("outer_product", a)?;
        let c = self.vector_len("outer_product", b)?;
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let value = av.iter().flat_map(|x| bv.iter().map(move |y| x * y)).collect();
        self.push("outer_product", vec![r, c], value, &[a, b], Op::Outer { a, b })
    }

    /// Row lookup: `out[i] = table[rows[i]]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let table = self.idx(table)?;
        let (n, cols) = self.matrix_dims("gather_rows", table)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::TokenOutOfRange { id: bad, vocab_size: n });
        }
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "no rows selected"));
        }
        let t = &self.nodes[table].value;
        let value = rows.iter().flat_map(|&r| t[r * cols..(r + 1) * cols].iter().copied()).collect();
        self.push(
            "gather_rows",
            vec![rows.len(), cols],
            value,
            &[table],
            Op::Gather {
                table,
                rows: rows.to_vec(),
                cols,
            },
        )
    }

    /// Mean softmax cross-entropy of `logits[b×c]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let logits = self.idx(logits)?;
        let (b, classes) = self.matrix_dims("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: classes,
            });
        }
        let mut probs = vec![0.0; b * classes];
        let mut total = 0.0;
        for (r, row) in self.nodes[logits].value.chunks(classes).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|u| (u - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[labels[r]];
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
        }
        self.push(
            "cross_entropy",
            Vec::new(),
            vec![total / b as f64],
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                classes,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let value = vec![self.nodes[x].value.iter().sum()];
        self.push("sum", Vec::new(), value, &[x], Op::Sum(x))
    }

    /// Reverse pass from a scalar `loss`. Only nodes that require gradients
    /// receive a buffer.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Tape(format!("loss must be a scalar, got shape {:?}", self.nodes[root].shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &j in [a, b].iter() {
                    if wants(*j) {
                        accumulate(grads, nodes, *j, |buf| add_into(buf, g));
                    }
                }
            }
            &Op::AddRow { x, bias, cols } => {
                if wants(x) {
                    accumulate(grads, nodes, x, |buf| add_into(buf, g));
                }
                if wants(bias) {
                    accumulate(grads, nodes, bias, |buf| {
                        for row in g.chunks(cols) {
                            add_into(buf, row);
                        }
                    });
                }
            }
            &Op::AddScalar { x, s } => {
                if wants(x) {
                    accumulate(grads, nodes, x, |buf| add_into(buf, g));
                }
                if wants(s) {
                    accumulate(grads, nodes, s, |buf| buf[0] += g.iter().sum::<f64>());
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let other = &nodes[b].value;
                    accumulate(grads, nodes, a, |buf| {
                        buf.iter_mut().zip(g.iter().zip(other.iter())).for_each(|(o, (gi, y))| *o += gi * y)
                    });
                }
                if wants(b) {
                    let other = &nodes[a].value;
                    accumulate(grads, nodes, b, |buf| {
                        buf.iter_mut().zip(g.iter().zip(other.iter())).for_each(|(o, (gi, y))| *o += gi * y)
                    });
                }
            }
            &Op::Scale(x, c) => {
                if wants(x) {
                    accumulate(grads, nodes, x, |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi));
                }
            }
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let da = kernels::matmul_nt(g, &nodes[b].value, m, n, k);
                    accumulate(grads, nodes, a, |buf| add_into(buf, &da));
                }
                if wants(b) {
                    let db = kernels::matmul_tn(&nodes[a].value, g, m, k, n);
                    accumulate(grads, nodes, b, |buf| add_into(buf, &db));
                }
            }
            &Op::MatVec { a, w, cols } => {
                if wants(a) {
                    let wv = &nodes[w].value;
                    accumulate(grads, nodes, a, |buf| {
                        for (row, gi) in buf.chunks_mut(cols).zip(g) {
                            row.iter_mut().zip(wv.iter()).for_each(|(o, wj)| *o += gi * wj);
                        }
                    });
                }
                if wants(w) {
                    let av = &nodes[a].value;
                    accumulate(grads, nodes, w, |buf| {
                        for (row, gi) in av.chunks(cols).zip(g) {
                            buf.iter_mut().zip(row).for_each(|(o, aj)| *o += gi * aj);
                        }
                    });
                }
            }
            Op::Unary { x, deriv } => {
                if wants(*x) {
                    accumulate(grads, nodes, *x, |buf| {
                        buf.iter_mut().zip(g.iter().zip(deriv)).for_each(|(o, (gi, d))| *o += gi * d)
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            } => {
                let cols = *cols;
                if wants(*gamma) {
                    accumulate(grads, nodes, *gamma, |buf| {
                        for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            buf.iter_mut().zip(gr.iter().zip(hr)).for_each(|(o, (gi, h))| *o += gi * h);
                        }
                    });
                }
                if wants(*beta) {
                    accumulate(grads, nodes, *beta, |buf| {
                        for gr in g.chunks(cols) {
                            add_into(buf, gr);
                        }
                    });
                }
                if wants(*x) {
                    let gam = &nodes[*gamma].value;
                    accumulate(grads, nodes, *x, |buf| {
                        let n = cols as f64;
                        for (r, ((br, gr), hr)) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(xhat.chunks(cols)).enumerate() {
                            let dh: Vec<f64> = gr.iter().zip(gam.iter()).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / n;
                            let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n;
                            for c in 0..cols {
                                br[c] += inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                            }
                        }
                    });
                }
            }
            &Op::Softmax { x, cols } => {
                if wants(x) {
                    let p = &nodes[i].value;
                    accumulate(grads, nodes, x, |buf| {
                        for ((br, gr), pr) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(p.chunks(cols)) {
                            let inner = dot(gr, pr);
                            for c in 0..cols {
                                br[c] += pr[c] * (gr[c] - inner);
                            }
                        }
                    });
                }
            }
            &Op::AttnScores { q, k, dims, scale } => {
                // q and k may be the same node; both roles then accumulate into one buffer
                if wants(q) {
                    let kv = &nodes[k].value;
                    accumulate(grads, nodes, q, |buf| scores_backward(buf, g, kv, dims, scale, true));
                }
                if wants(k) {
                    let qv = &nodes[q].value;
                    accumulate(grads, nodes, k, |buf| scores_backward(buf, g, qv, dims, scale, false));
                }
            }
            &Op::AttnContext { p, v, dims } => {
                let AttnDims { batch, seq, heads, head_dim } = dims;
                let d = dims.model_dim();
                if wants(p) {
                    let vv = &nodes[v].value;
                    accumulate(grads, nodes, p, |buf| {
                        for b in 0..batch {
                            for h in 0..heads {
                                for i in 0..seq {
                                    let gi = &g[(b * seq + i) * d + h * head_dim..][..head_dim];
                                    let out = &mut buf[((b * heads + h) * seq + i) * seq..][..seq];
                                    for (j, o) in out.iter_mut().enumerate() {
                                        *o += dot(gi, &vv[(b * seq + j) * d + h * head_dim..][..head_dim]);
                                    }
                                }
                            }
                        }
                    });
                }
                if wants(v) {
                    let pv = &nodes[p].value;
                    accumulate(grads, nodes, v, |buf| {
                        for b in 0..batch {
                            for h in 0..heads {
                                for i in 0..seq {
                                    let prow = &pv[((b * heads + h) * seq + i) * seq..][..seq];
                                    let gi = &g[(b * seq + i) * d + h * head_dim..][..head_dim];
                                    for (j, &pij) in prow.iter().enumerate() {
                                        if pij == 0.0 {
                                            continue;
                                        }
                                        let o = &mut buf[(b * seq + j) * d + h * head_dim..][..head_dim];
                                        o.iter_mut().zip(gi).for_each(|(o, x)| *o += pij * x);
                                    }
                                }
                            }
                        }
                    });
                }
            }
            &Op::Outer { a, b } => {
                let cols = nodes[b].value.len();
                if wants(a) {
                    let bv = &nodes[b].value;
                    accumulate(grads, nodes, a, |buf| {
                        for (o, gr) in buf.iter_mut().zip(g.chunks(cols)) {
                            *o += dot(gr, bv);
                        }
                    });
                }
                if wants(b) {
                    let av = &nodes[a].value;
                    accumulate(grads, nodes, b, |buf| {
                        for (ai, gr) in av.iter().zip(g.chunks(cols)) {
                            buf.iter_mut().zip(gr).for_each(|(o, x)| *o += ai * x);
                        }
                    });
                }
            }
            Op::Gather { table, rows, cols } => {
                if wants(*table) {
                    let cols = *cols;
                    accumulate(grads, nodes, *table, |buf| {
                        for (gr, &r) in g.chunks(cols).zip(rows) {
                            add_into(&mut buf[r * cols..(r + 1) * cols], gr);
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                classes,
            } => {
                if wants(*logits) {
                    let scale = g[0] / labels.len() as f64;
                    accumulate(grads, nodes, *logits, |buf| {
                        for (r, (br, pr)) in buf.chunks_mut(*classes).zip(probs.chunks(*classes)).enumerate() {
                            for c in 0..*classes {
                                let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                                br[c] += scale * (pr[c] - onehot);
                            }
                        }
                    });
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    accumulate(grads, nodes, x, |buf| buf.iter_mut().for_each(|o| *o += g[0]));
                }
            }
        }
    }
}

/// Gradient of attention scores w.r.t. queries (`wrt_query`) or keys.
/// `other` holds the keys or queries respectively.
fn scores_backward(buf: &mut [f64], g: &[f64], other: &[f64], dims: AttnDims, scale: f64, wrt_query: bool) {
    let AttnDims { batch, seq, heads, head_dim } = dims;
    let d = dims.model_dim();
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let grow = &g[((b * heads + h) * seq + i) * seq..][..seq];
                for (j, &gij) in grow.iter().enumerate() {
                    if gij == 0.0 {
                        continue;
                    }
                    let (dst, src) = if wrt_query { (i, j) } else { (j, i) };
                    let s = &other[(b * seq + src) * d + h * head_dim..][..head_dim];
                    let o = &mut buf[(b * seq + dst) * d + h * head_dim..][..head_dim];
                    o.iter_mut().zip(s).for_each(|(o, x)| *o += scale * gij * x);
                }
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(o, x)| *o += x);
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node<'_>], j: usize, f: impl FnOnce(&mut [f64])) {
    let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
    f(buf);
}

/// Result of [`Tape::backward`]: one optional buffer per recorded node.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not require
    /// gradients (or does not influence the loss).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index)?.as_deref()
    }

    /// Adds the gradient of `v` into `tensor`'s buffer. Frozen tensors are
    /// left without a buffer.
    pub fn write_to(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        if !tensor.requires_grad() {
            return Ok(());
        }
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.numel()]),
        }
    }
}
