//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations as they are evaluated; values are computed
//! eagerly at record time and the tape is replayed in reverse by
//! [`Graph::backward`]. The graph is rebuilt per training step, which keeps
//! variable-length sequences trivial. All construction and backward passes
//! are single-threaded; gradient accumulation happens in tape order, so
//! results are bit-for-bit deterministic.
//!
//! Leaves staged with `requires_grad = false` never receive gradients, which
//! is how the frozen-backbone guarantee is enforced at the engine level.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, factor: f64 },
    Gelu { a: NodeId },
    Ln { a: NodeId },
    Softmax { a: NodeId },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    Embedding { table: NodeId, ids: Vec<usize> },
    ConcatRows { a: NodeId, b: NodeId },
    SliceRows { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize },
    SelectCols { a: NodeId, idx: Vec<usize> },
    Transpose { a: NodeId },
    SumAll { a: NodeId },
    Reshape { a: NodeId },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "expected a 2-d tensor".into(),
        }),
    }
}

fn raw_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let out = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] += av * row[j];
            }
        }
    }
    c
}

fn raw_transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            t[c * m + r] = a[r * n + c];
        }
    }
    t
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    /// Scalar value of a single-element node.
    pub fn value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.node(id).data.len(), 1);
        self.node(id).data[0]
    }

    /// Gradient of a node, if backward reached it and it requires grad.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    /// Stages a persistent tensor as a leaf, copying its data and grad flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "constant",
                shape,
                reason: format!("shape product does not match data length {}", data.len()),
            });
        }
        Ok(self.push(data, shape, false, Op::Leaf))
    }

    /// Copies a node's accumulated gradient into a persistent tensor.
    pub fn accumulate_grad_into(&self, id: NodeId, target: &mut Tensor) -> Result<()> {
        if let Some(g) = self.grad(id) {
            target.accumulate_grad(g)?;
        }
        Ok(())
    }

    // ── Operations ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = raw_matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(data, vec![m, n], rg, Op::MatMul { a, b }))
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, rg, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Row-wise bias addition: `[m, n] + [n]`. The only broadcast allowed.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = dims2(self.shape(a), "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bias_data = self.data(bias).to_vec();
        let mut data = self.data(a).to_vec();
        for r in 0..m {
            for j in 0..n {
                data[r * n + j] += bias_data[j];
            }
        }
        let rg = self.node(a).requires_grad || self.node(bias).requires_grad;
        Ok(self.push(data, vec![m, n], rg, Op::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let data = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.node(a).requires_grad;
        self.push(data, shape, rg, Op::Scale { a, factor })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data = self.data(a).iter().map(|x| gelu(*x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.node(a).requires_grad;
        self.push(data, shape, rg, Op::Gelu { a })
    }

    /// Natural log, elementwise. Inputs must be strictly positive.
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if self.data(a).iter().any(|x| *x <= 0.0) {
            return Err(Error::InvalidInput("ln requires strictly positive inputs".into()));
        }
        let data = self.data(a).iter().map(|x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.node(a).requires_grad;
        Ok(self.push(data, shape, rg, Op::Ln { a }))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = dims2(self.shape(a), "softmax")?;
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: self.shape(a).to_vec(),
                reason: "zero-length axis".into(),
            });
        }
        if self.data(a).iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let mut data = self.data(a).to_vec();
        for r in 0..m {
            softmax_row(&mut data[r * n..(r + 1) * n]);
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(data, vec![m, n], rg, Op::Softmax { a }))
    }

    /// Row-wise layer normalization with affine transform.
    /// Uses the population variance (divide by row length).
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = dims2(self.shape(a), "layer_norm")?;
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "layer_norm",
                shape: self.shape(a).to_vec(),
                reason: "zero-length axis".into(),
            });
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [n] {
                return Err(Error::ShapeMismatch {
                    op: if name == "gamma" { "layer_norm gamma" } else { "layer_norm beta" },
                    lhs: vec![m, n],
                    rhs: self.shape(id).to_vec(),
                });
            }
        }
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut data = self.data(a).to_vec();
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                row[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.node(a).requires_grad
            || self.node(gamma).requires_grad
            || self.node(beta).requires_grad;
        Ok(self.push(data, vec![m, n], rg, Op::LayerNorm { a, gamma, beta, eps }))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, n) = dims2(self.shape(logits), "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![m, n],
                rhs: vec![targets.len()],
            });
        }
        for (row, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: n,
                    context: Some(format!("target for row {row}")),
                });
            }
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &self.data(logits)[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / m as f64;
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        ))
    }

    /// Row gather: output row `r` is `table[ids[r]]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = dims2(self.shape(table), "embedding")?;
        for (pos, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: rows,
                    context: Some(format!("id at position {pos}")),
                });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&self.data(table)[id * d..(id + 1) * d]);
        }
        let rg = self.node(table).requires_grad;
        Ok(self.push(data, vec![ids.len(), d], rg, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Vertical concatenation of two 2-d nodes with equal column counts.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = dims2(self.shape(a), "concat_rows")?;
        let (rb, cb) = dims2(self.shape(b), "concat_rows")?;
        if ca != cb {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(self.data(a));
        data.extend_from_slice(self.data(b));
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(data, vec![ra + rb, ca], rg, Op::ConcatRows { a, b }))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = dims2(self.shape(a), "slice_rows")?;
        if start > end || end > m {
            return Err(Error::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                size: m,
                context: Some(format!("range {start}..{end}")),
            });
        }
        let data = self.data(a)[start * n..end * n].to_vec();
        let rg = self.node(a).requires_grad;
        Ok(self.push(data, vec![end - start, n], rg, Op::SliceRows { a, start }))
    }

    /// Horizontal concatenation of 2-d nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_cols requires at least one part".into()));
        }
        let (m, _) = dims2(self.shape(parts[0]), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (mp, np) = dims2(self.shape(p), "concat_cols")?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(np);
            total += np;
        }
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for r in 0..m {
                let src = &self.data(p)[r * w..(r + 1) * w];
                data[r * total + offset..r * total + offset + w].copy_from_slice(src);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.node(p).requires_grad);
        Ok(self.push(data, vec![m, total], rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = dims2(self.shape(a), "slice_cols")?;
        if start > end || end > n {
            return Err(Error::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                size: n,
                context: Some(format!("range {start}..{end}")),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&self.data(a)[r * n + start..r * n + end]);
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(data, vec![m, w], rg, Op::SliceCols { a, start }))
    }

    /// Column gather: output column `j` is input column `idx[j]`.
    pub fn select_cols(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = dims2(self.shape(a), "select_cols")?;
        for &i in idx {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    op: "select_cols",
                    index: i,
                    size: n,
                    context: None,
                });
            }
        }
        let w = idx.len();
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            for &i in idx {
                data.push(self.data(a)[r * n + i]);
            }
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(data, vec![m, w], rg, Op::SelectCols { a, idx: idx.to_vec() }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = dims2(self.shape(a), "transpose")?;
        let data = raw_transpose(self.data(a), m, n);
        let rg = self.node(a).requires_grad;
        Ok(self.push(data, vec![n, m], rg, Op::Transpose { a }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.data(a).iter().sum();
        let rg = self.node(a).requires_grad;
        self.push(vec![total], vec![1], rg, Op::SumAll { a })
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("target does not match {} elements", self.data(a).len()),
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.node(a).requires_grad;
        Ok(self.push(data, shape, rg, Op::Reshape { a }))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Accumulates gradients into every
    /// node on the path that requires grad; leaves with
    /// `requires_grad = false` are never written to.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.node(loss).shape.clone(),
            });
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n_nodes).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let grad = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &grad, &mut grads);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn add_into(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: NodeId,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; self.nodes[target.0].data.len()]);
        f(slot);
    }

    fn propagate(&self, i: usize, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].requires_grad {
                    // dA = dC · B^T, computed through the same
                    // row-accumulation kernel as the forward pass (a
                    // per-element dot product would serialize on the
                    // floating-point adds).
                    let bt = raw_transpose(self.data(*b), k, n);
                    let da = raw_matmul(grad, &bt, m, n, k);
                    self.add_into(grads, *a, |ga| {
                        for (x, d) in ga.iter_mut().zip(&da) {
                            *x += d;
                        }
                    });
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T · dC
                    let ad = self.data(*a);
                    self.add_into(grads, *b, |gb| {
                        for p in 0..k {
                            for r in 0..m {
                                let av = ad[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[p * n + j] += av * grad[r * n + j];
                                }
                            }
                        }
                    });
                }
            }

            Op::Add { a, b } => {
                self.add_into(grads, *a, |g| {
                    for (x, d) in g.iter_mut().zip(grad) {
                        *x += d;
                    }
                });
                self.add_into(grads, *b, |g| {
                    for (x, d) in g.iter_mut().zip(grad) {
                        *x += d;
                    }
                });
            }

            Op::Sub { a, b } => {
                self.add_into(grads, *a, |g| {
                    for (x, d) in g.iter_mut().zip(grad) {
                        *x += d;
                    }
                });
                self.add_into(grads, *b, |g| {
                    for (x, d) in g.iter_mut().zip(grad) {
                        *x -= d;
                    }
                });
            }

            Op::Mul { a, b } => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                self.add_into(grads, *a, |g| {
                    for ((x, d), y) in g.iter_mut().zip(grad).zip(bd) {
                        *x += d * y;
                    }
                });
                self.add_into(grads, *b, |g| {
                    for ((x, d), y) in g.iter_mut().zip(grad).zip(ad) {
                        *x += d * y;
                    }
                });
            }

            Op::AddBias { a, bias } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                self.add_into(grads, *a, |g| {
                    for (x, d) in g.iter_mut().zip(grad) {
                        *x += d;
                    }
                });
                self.add_into(grads, *bias, |g| {
                    for r in 0..m {
                        for j in 0..n {
                            g[j] += grad[r * n + j];
                        }
                    }
                });
            }

            Op::Scale { a, factor } => {
                let f = *factor;
                self.add_into(grads, *a, |g| {
                    for (x, d) in g.iter_mut().zip(grad) {
                        *x += d * f;
                    }
                });
            }

            Op::Gelu { a } => {
                let ad = self.data(*a);
                self.add_into(grads, *a, |g| {
                    for ((x, d), v) in g.iter_mut().zip(grad).zip(ad) {
                        *x += d * gelu_grad(*v);
                    }
                });
            }

            Op::Ln { a } => {
                let ad = self.data(*a);
                self.add_into(grads, *a, |g| {
                    for ((x, d), v) in g.iter_mut().zip(grad).zip(ad) {
                        *x += d / v;
                    }
                });
            }

            Op::Softmax { a } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let y = &node.data;
                self.add_into(grads, *a, |g| {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let dr = &grad[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }

            Op::LayerNorm { a, gamma, beta, eps } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let src = self.data(*a);
                let gm = self.data(*gamma);
                let nf = n as f64;
                // Recompute per-row statistics; saves storing them at forward.
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let row = &src[r * n..(r + 1) * n];
                    let dr = &grad[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = dr.iter().zip(gm).map(|(d, g)| d * g).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dgamma[j] += dr[j] * xhat[j];
                        dbeta[j] += dr[j];
                        dx[r * n + j] =
                            inv_std * (dxhat[j] - sum_dxhat / nf - xhat[j] * sum_dxhat_xhat / nf);
                    }
                }
                self.add_into(grads, *a, |g| {
                    for (x, d) in g.iter_mut().zip(&dx) {
                        *x += d;
                    }
                });
                self.add_into(grads, *gamma, |g| {
                    for (x, d) in g.iter_mut().zip(&dgamma) {
                        *x += d;
                    }
                });
                self.add_into(grads, *beta, |g| {
                    for (x, d) in g.iter_mut().zip(&dbeta) {
                        *x += d;
                    }
                });
            }

            Op::CrossEntropy { logits, targets } => {
                let (m, n) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                let src = self.data(*logits);
                let upstream = grad[0];
                let targets = targets.clone();
                self.add_into(grads, *logits, |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &src[r * n..(r + 1) * n];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for j in 0..n {
                            let p = exps[j] / sum;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[r * n + j] += upstream * (p - onehot) / m as f64;
                        }
                    }
                });
            }

            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let ids = ids.clone();
                self.add_into(grads, *table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += grad[r * d + j];
                        }
                    }
                });
            }

            Op::ConcatRows { a, b } => {
                let split = self.nodes[a.0].data.len();
                self.add_into(grads, *a, |g| {
                    for (x, d) in g.iter_mut().zip(&grad[..split]) {
                        *x += d;
                    }
                });
                self.add_into(grads, *b, |g| {
                    for (x, d) in g.iter_mut().zip(&grad[split..]) {
                        *x += d;
                    }
                });
            }

            Op::SliceRows { a, start, .. } => {
                let n = self.shape(*a)[1];
                let offset = start * n;
                self.add_into(grads, *a, |g| {
                    for (k, d) in grad.iter().enumerate() {
                        g[offset + k] += d;
                    }
                });
            }

            Op::ConcatCols { parts } => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.add_into(grads, p, |g| {
                        for r in 0..m {
                            for j in 0..w {
                                g[r * w + j] += grad[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }

            Op::SliceCols { a, start, .. } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let w = node.shape[1];
                let start = *start;
                self.add_into(grads, *a, |g| {
                    for r in 0..m {
                        for j in 0..w {
                            g[r * n + start + j] += grad[r * w + j];
                        }
                    }
                });
            }

            Op::SelectCols { a, idx } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let w = node.shape[1];
                let idx = idx.clone();
                self.add_into(grads, *a, |g| {
                    for r in 0..m {
                        for (j, &src_col) in idx.iter().enumerate() {
                            g[r * n + src_col] += grad[r * w + j];
                        }
                    }
                });
            }

            Op::Transpose { a } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.add_into(grads, *a, |g| {
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] += grad[c * m + r];
                        }
                    }
                });
            }

            Op::SumAll { a } => {
                let d = grad[0];
                self.add_into(grads, *a, |g| {
                    for x in g.iter_mut() {
                        *x += d;
                    }
                });
            }

            Op::Reshape { a } => {
                self.add_into(grads, *a, |g| {
                    for (x, d) in g.iter_mut().zip(grad) {
                        *x += d;
                    }
                });
            }
        }
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `build` stages the given parameters into a fresh graph (in order) and
/// returns the scalar loss node. The reported error is
/// `max_i |analytic_i - central_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(build: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let stage = |g: &mut Graph, tensors: &[Tensor]| -> Vec<NodeId> {
        tensors.iter().map(|t| g.leaf(t)).collect()
    };

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids = stage(&mut g, tensors);
        let loss = build(&mut g, &ids)?;
        let v = g.value(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids = stage(&mut g, params);
    let loss = build(&mut g, &ids)?;
    if !g.value(loss).is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, t)| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut max_err: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let central = (plus - minus) / (2.0 * h);
            let a = analytic[p][i];
            let err = (a - central).abs() / f64::max(1.0, a.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        Tensor::gaussian(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    // Independent oracle: naive triple-loop product, written separately
    // from the implementation path.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g
            .constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![3, 3])
            .unwrap();
        let b = g
            .constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2])
            .unwrap();
        let c = g.matmul(eye, b).unwrap();
        assert_eq!(g.data(c), g.data(b));
    }

    #[test]
    fn matmul_one_by_one() {
        let mut g = Graph::new();
        let a = g.constant(vec![2.0], vec![1, 1]).unwrap();
        let b = g.constant(vec![3.0], vec![1, 1]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = random_tensor(vec![5, 4], 1);
        let b = random_tensor(vec![4, 3], 2);
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(&a), g.leaf(&b));
        let c = g.matmul(na, nb).unwrap();
        let expected = matmul_oracle(a.data(), b.data(), 5, 4, 3);
        assert!(max_abs_diff(g.data(c), &expected) < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = g.constant(vec![0.0; 8], vec![4, 2]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_analytic() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0, 0.0], vec![1, 2]).unwrap();
        let s = g.softmax(a).unwrap();
        assert!(max_abs_diff(g.data(s), &[0.5, 0.5]) < 1e-12);

        let b = g.constant(vec![0.0, 3.0f64.ln()], vec![1, 2]).unwrap();
        let s2 = g.softmax(b).unwrap();
        assert!(max_abs_diff(g.data(s2), &[0.25, 0.75]) < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_at_large_magnitude() {
        let mut g = Graph::new();
        let big = g.constant(vec![1000.0, 1001.0], vec![1, 2]).unwrap();
        let small = g.constant(vec![0.0, 1.0], vec![1, 2]).unwrap();
        let sb = g.softmax(big).unwrap();
        let ss = g.softmax(small).unwrap();
        assert!(g.data(sb).iter().all(|v| v.is_finite()));
        assert!(max_abs_diff(g.data(sb), g.data(ss)) < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let a = g.constant(vec![f64::NAN, 0.0], vec![1, 2]).unwrap();
        assert!(g.softmax(a).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(vec![5.0, 5.0, 5.0], vec![1, 3]).unwrap();
        let gamma = g.constant(vec![1.0, 1.0, 1.0], vec![3]).unwrap();
        let beta = g.constant(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
        let out = g.layer_norm(a, gamma, beta, 1e-5).unwrap();
        assert!(g.data(out).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, -1.0], vec![1, 2]).unwrap();
        let gamma = g.constant(vec![1.0, 1.0], vec![2]).unwrap();
        let beta = g.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let out = g.layer_norm(a, gamma, beta, 1e-12).unwrap();
        assert!(max_abs_diff(g.data(out), &[1.0, -1.0]) < 1e-6);
    }

    #[test]
    fn layer_norm_matches_direct_formula_oracle() {
        let x = random_tensor(vec![3, 8], 5);
        let gm = random_tensor(vec![8], 6);
        let bt = random_tensor(vec![8], 7);
        let eps = 1e-5;
        let mut g = Graph::new();
        let (nx, ng, nb) = (g.leaf(&x), g.leaf(&gm), g.leaf(&bt));
        let out = g.layer_norm(nx, ng, nb, eps).unwrap();

        // Direct mean/variance oracle.
        let mut expected = vec![0.0; 24];
        for r in 0..3 {
            let row = &x.data()[r * 8..(r + 1) * 8];
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            for j in 0..8 {
                expected[r * 8 + j] =
                    (row[j] - mean) / (var + eps).sqrt() * gm.data()[j] + bt.data()[j];
            }
        }
        assert!(max_abs_diff(g.data(out), &expected) < 1e-12);
    }

    #[test]
    fn layer_norm_rejects_zero_length_axis() {
        let mut g = Graph::new();
        let a = g.constant(vec![], vec![1, 0]).unwrap();
        let gamma = g.constant(vec![], vec![0]).unwrap();
        let beta = g.constant(vec![], vec![0]).unwrap();
        assert!(g.layer_norm(a, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.constant(vec![0.0; 4], vec![1, 4]).unwrap();
        let loss = g.cross_entropy(logits, &[2]).unwrap();
        assert!((g.value(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logits_approach_zero() {
        let mut g = Graph::new();
        let logits = g.constant(vec![50.0, 0.0, 0.0], vec![1, 3]).unwrap();
        let loss = g.cross_entropy(logits, &[0]).unwrap();
        assert!(g.value(loss) < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_per_example_oracle() {
        let logits = random_tensor(vec![3, 5], 11);
        let targets = [4usize, 0, 2];
        let mut g = Graph::new();
        let nl = g.leaf(&logits);
        let loss = g.cross_entropy(nl, &targets).unwrap();

        // Per-example oracle: softmax each row independently, sum, divide.
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits.data()[r * 5..(r + 1) * 5];
            let sum: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[t].exp() / sum).ln();
        }
        assert!((g.value(loss) - total / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_names_bad_target_index() {
        let mut g = Graph::new();
        let logits = g.constant(vec![0.0; 4], vec![1, 4]).unwrap();
        let err = g.cross_entropy(logits, &[7]).unwrap_err();
        assert!(err.to_string().contains('7'), "{err}");
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = tensor(vec![1, 3], vec![1.0, -2.0, 3.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        let sq = g.mul(nx, nx).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert!(max_abs_diff(g.grad(nx).unwrap(), &[2.0, -4.0, 6.0]) < 1e-12);
    }

    #[test]
    fn backward_softmax_cross_entropy_identity() {
        // d loss / d logits = p - onehot(target)
        let logits = tensor(vec![1, 4], vec![0.3, -1.0, 2.0, 0.1]).with_requires_grad(true);
        let mut g = Graph::new();
        let nl = g.leaf(&logits);
        let loss = g.cross_entropy(nl, &[2]).unwrap();
        g.backward(loss).unwrap();

        let probs = {
            let mut row = logits.data().to_vec();
            softmax_row(&mut row);
            row
        };
        let expected: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, p)| p - if j == 2 { 1.0 } else { 0.0 })
            .collect();
        assert!(max_abs_diff(g.grad(nl).unwrap(), &expected) < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn backward_skips_frozen_leaves() {
        let frozen = tensor(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let live = tensor(vec![2, 2], vec![0.5; 4]).with_requires_grad(true);
        let mut g = Graph::new();
        let nf = g.leaf(&frozen);
        let nl = g.leaf(&live);
        let prod = g.matmul(nf, nl).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert!(g.grad(nf).is_none());
        assert!(g.grad(nl).is_some());
    }

    #[test]
    fn grad_check_quadratic() {
        let x = tensor(vec![1], vec![3.0]).with_requires_grad(true);
        let err = grad_check(
            |g, ids| {
                let two_d = g.reshape(ids[0], vec![1, 1])?;
                let sq = g.mul(two_d, two_d)?;
                Ok(g.sum_all(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn grad_check_linear_is_roundoff_level() {
        let x = tensor(vec![1, 3], vec![0.4, -0.2, 1.1]).with_requires_grad(true);
        let err = grad_check(
            |g, ids| {
                let w = g.constant(vec![2.0, -1.0, 0.5], vec![3, 1])?;
                let y = g.matmul(ids[0], w)?;
                Ok(g.sum_all(y))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn grad_check_composite_ops() {
        // Exercises matmul, bias, gelu, layer norm, softmax, slicing, concat,
        // select, ln, transpose in one scalar function.
        let x = random_tensor(vec![3, 4], 21).with_requires_grad(true);
        let w = random_tensor(vec![4, 4], 22).with_requires_grad(true);
        let b = random_tensor(vec![4], 23).with_requires_grad(true);
        let gm = random_tensor(vec![4], 24).with_requires_grad(true);
        let bt = random_tensor(vec![4], 25).with_requires_grad(true);
        let err = grad_check(
            |g, ids| {
                let (x, w, b, gm, bt) = (ids[0], ids[1], ids[2], ids[3], ids[4]);
                let h = g.matmul(x, w)?;
                let h = g.add_bias(h, b)?;
                let h = g.gelu(h);
                let h = g.layer_norm(h, gm, bt, 1e-5)?;
                let wt = g.transpose(w)?;
                let h2 = g.matmul(h, wt)?;
                let top = g.slice_rows(h2, 0, 2)?;
                let bottom = g.slice_rows(h2, 2, 3)?;
                let joined = g.concat_rows(top, bottom)?;
                let left = g.slice_cols(joined, 0, 2)?;
                let right = g.slice_cols(joined, 2, 4)?;
                let wide = g.concat_cols(&[left, right])?;
                let probs = g.softmax(wide)?;
                let picked = g.select_cols(probs, &[0, 3, 1])?;
                let lp = g.ln(picked)?;
                let scaled = g.scale(lp, -0.5);
                Ok(g.sum_all(scaled))
            },
            &[x, w, b, gm, bt],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn grad_check_embedding_path() {
        let table = random_tensor(vec![6, 3], 31).with_requires_grad(true);
        let err = grad_check(
            |g, ids| {
                let emb = g.embedding(ids[0], &[4, 1, 4, 0])?;
                let sq = g.mul(emb, emb)?;
                Ok(g.sum_all(sq))
            },
            &[table],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn embedding_rejects_out_of_range_id_with_position() {
        let mut g = Graph::new();
        let table = g.constant(vec![0.0; 12], vec![4, 3]).unwrap();
        let err = g.embedding(table, &[1, 9]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('9') && msg.contains("position 1"), "{msg}");
    }

    #[test]
    fn concat_with_empty_rows_is_identity() {
        let mut g = Graph::new();
        let empty = g.constant(vec![], vec![0, 3]).unwrap();
        let b = g.constant(vec![1.0, 2.0, 3.0], vec![1, 3]).unwrap();
        let joined = g.concat_rows(empty, b).unwrap();
        assert_eq!(g.data(joined), g.data(b));
        assert_eq!(g.shape(joined), &[1, 3]);
    }
}
